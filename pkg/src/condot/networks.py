"""Input convex (ICNN) and partially input convex (PICNN) potentials.

ICNN layer ``k``::

    z_{k+1} = sigma_k(Wx_k x + Wz_k z_k + b_k)

PICNN layer ``k`` (context stream ``u`` modulates the convex stream ``z``)::

    u_{k+1} = tau_k(V_k u_k + v_k)
    z_{k+1} = sigma_k(Wz_k (z_k * [Wzu_k u_k + bz_k]_+)
                      + Wx_k (x * (Wxu_k u_k + bx_k)) + Wu_k u_k + bu_k)

Both networks can seed ``z_0`` with quadratic layers
``q_j(x) = 0.5 ||M_j (x - m_j)||^2``; without them ``z_0 = 0``. A PICNN may
also replace ``u_0 = c`` by an anchor modulator ``softmax(c M + m0)``.
Convexity in ``x`` holds when every effective ``Wz_k`` is entrywise
non-negative and ``sigma_k`` is convex non-decreasing.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .autodiff import DTYPE, ParamVector, grad_wrt_input
from .errors import AnchorDimMismatch, CheckpointError, ConfigError, MissingMoments, ShapeMismatch
from .gaussian_ot import AffineMongeMap, QuadLayer, gaussian_monge_map
from .tensor_core import GaussianMoments

CHECKPOINT_FORMAT = "condot.convexnet"
CHECKPOINT_VERSION = 1

CONSTRAINT_MODES = ("clamp", "penalty", "reparam")
ACTIVATIONS = ("softplus", "relu", "leaky_relu")

# relative amplitude of the symmetry-breaking noise added to "approximately"
# initialised weights; zero targets use _ZERO_SCALE as their reference scale
INIT_NOISE = 1e-3
_ZERO_SCALE = 1e-2


def softplus(z: torch.Tensor) -> torch.Tensor:
    # branch-stable form; smooth with a closed-form second derivative
    return torch.clamp_min(z, 0.0) + torch.log1p(torch.exp(-torch.abs(z)))


def _inv_softplus(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def activation(name: str, z: torch.Tensor) -> torch.Tensor:
    if name == "softplus":
        return softplus(z)
    if name == "relu":
        return torch.relu(z)
    if name == "leaky_relu":
        return torch.nn.functional.leaky_relu(z, 0.2)
    if name == "identity":
        return z
    raise ConfigError(f"unknown activation {name!r}")


def linear_regime_bias(act: str) -> float:
    """Bias ``s`` with ``act'(s) ~ 1`` for non-negative inputs."""
    return 10.0 if act == "softplus" else 1.0


@dataclass(frozen=True)
class NetSpec:
    kind: str  # "icnn" | "picnn"
    input_dim: int
    context_dim: int = 0
    hidden: tuple[int, ...] = (64, 64, 64, 64)
    activation: str = "softplus"
    context_activation: str = "leaky_relu"
    constraint_mode: str = "clamp"
    n_quad: int = 0
    n_anchors: int = 0
    context_hidden: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.context_hidden is not None:
            object.__setattr__(self, "context_hidden", tuple(int(h) for h in self.context_hidden))
        if self.kind not in ("icnn", "picnn"):
            raise ConfigError(f"unknown network kind {self.kind!r}")
        if self.input_dim < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError("input_dim and hidden widths must be >= 1")
        if self.constraint_mode not in CONSTRAINT_MODES:
            raise ConfigError(f"constraint_mode must be one of {CONSTRAINT_MODES}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        if self.kind == "picnn" and self.context_dim < 1:
            raise ConfigError("a PICNN needs context_dim >= 1")
        if self.kind == "icnn" and self.n_anchors:
            raise ConfigError("anchors only apply to PICNNs")

    @property
    def widths(self) -> tuple[int, ...]:
        return self.hidden + (1,)

    @property
    def n_layers(self) -> int:
        return len(self.widths)

    @property
    def u_widths(self) -> tuple[int, ...]:
        """Widths of u_0 ... u_{K-1}."""
        u0 = self.n_anchors if self.n_anchors else self.context_dim
        rest = self.context_hidden if self.context_hidden is not None else (u0,) * (self.n_layers - 1)
        if len(rest) != self.n_layers - 1:
            raise ConfigError(f"context_hidden needs {self.n_layers - 1} entries")
        return (u0,) + tuple(rest)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["context_hidden"] = None if self.context_hidden is None else list(self.context_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        if d.get("context_hidden") is not None:
            d["context_hidden"] = tuple(d["context_hidden"])
        return cls(**d)


class ConvexNet(nn.Module):
    """ICNN or PICNN potential; ``forward`` returns one value per row of ``x``."""

    def __init__(self, spec: NetSpec):
        super().__init__()
        self.spec = spec
        d, widths = spec.input_dim, spec.widths
        if spec.n_quad:
            self._param("quad_M", (spec.n_quad, d, d))
            self._param("quad_m", (spec.n_quad, d))
        if spec.kind == "picnn":
            uw = spec.u_widths
            if spec.n_anchors:
                self._param("mod_M", (spec.context_dim, spec.n_anchors))
                self._param("mod_b", (spec.n_anchors,))
            for k in range(spec.n_layers - 1):
                self._param(f"V{k}", (uw[k + 1], uw[k]))
                self._param(f"v{k}", (uw[k + 1],))
        prev = spec.n_quad
        for k, w in enumerate(widths):
            u = spec.u_widths[k] if spec.kind == "picnn" else 0
            if prev:
                self._param(f"Wz{k}", (w, prev))
                if spec.kind == "picnn":
                    self._param(f"Wzu{k}", (prev, u))
                    self._param(f"bz{k}", (prev,))
            self._param(f"Wx{k}", (w, d))
            if spec.kind == "picnn":
                self._param(f"Wxu{k}", (d, u))
                self._param(f"bx{k}", (d,))
                self._param(f"Wu{k}", (w, u))
                self._param(f"bu{k}", (w,))
            else:
                self._param(f"b{k}", (w,))
            prev = w

    def _param(self, name: str, shape: tuple[int, ...]) -> None:
        self.register_parameter(name, nn.Parameter(torch.zeros(shape, dtype=DTYPE)))

    @property
    def kind(self) -> str:
        return self.spec.kind

    def z_weight_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.startswith("Wz") and not n.startswith("Wzu")]

    def z_weights(self) -> list[torch.Tensor]:
        return [getattr(self, n) for n in self.z_weight_names()]

    def effective_z_weight(self, k: int) -> torch.Tensor:
        W = getattr(self, f"Wz{k}")
        return softplus(W) if self.spec.constraint_mode == "reparam" else W

    def quad(self, x: torch.Tensor) -> torch.Tensor:
        diff = x.unsqueeze(-2) - self.quad_m  # (..., n_quad, d)
        r = (self.quad_M @ diff.unsqueeze(-1)).squeeze(-1)
        return 0.5 * (r * r).sum(-1)

    def modulate(self, c: torch.Tensor) -> torch.Tensor:
        return torch.softmax(c @ self.mod_M + self.mod_b, dim=-1)

    def _check(self, x: torch.Tensor, c: torch.Tensor | None) -> None:
        if x.shape[-1] != self.spec.input_dim:
            raise ShapeMismatch(f"x has {x.shape[-1]} features, network expects {self.spec.input_dim}")
        if self.kind == "picnn":
            if c is None or c.shape[-1] != self.spec.context_dim:
                got = None if c is None else c.shape[-1]
                raise ShapeMismatch(f"context has dim {got}, network expects {self.spec.context_dim}")

    def forward(self, x: torch.Tensor, c: torch.Tensor | None = None) -> torch.Tensor:
        self._check(x, c)
        spec = self.spec
        z = self.quad(x) if spec.n_quad else None
        last = spec.n_layers - 1
        if spec.kind == "icnn":
            for k in range(spec.n_layers):
                pre = x @ getattr(self, f"Wx{k}").T
                if z is not None:
                    pre = pre + z @ self.effective_z_weight(k).T
                pre = pre + getattr(self, f"b{k}")
                z = activation("identity" if k == last else spec.activation, pre)
            return z[..., 0]
        u = self.modulate(c) if spec.n_anchors else c
        for k in range(spec.n_layers):
            gate_x = u @ getattr(self, f"Wxu{k}").T + getattr(self, f"bx{k}")
            pre = (x * gate_x) @ getattr(self, f"Wx{k}").T
            if z is not None:
                gate_z = torch.relu(u @ getattr(self, f"Wzu{k}").T + getattr(self, f"bz{k}"))
                pre = pre + (z * gate_z) @ self.effective_z_weight(k).T
            pre = pre + u @ getattr(self, f"Wu{k}").T
            pre = pre + getattr(self, f"bu{k}")
            z = activation("identity" if k == last else spec.activation, pre)
            if k < last:
                u = activation(spec.context_activation, u @ getattr(self, f"V{k}").T + getattr(self, f"v{k}"))
        return z[..., 0]

    def params(self) -> ParamVector:
        return ParamVector.from_module(self)

    def set_params(self, pv: ParamVector) -> None:
        pv.load_into(self)

    # -- serialization ---------------------------------------------------

    def to_checkpoint(self) -> dict:
        pv = self.params()
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "spec": self.spec.to_dict(),
            "layout": [[s.name, list(s.shape)] for s in pv.layout],
            "payload": encode_array(pv.values),
        }

    @classmethod
    def from_checkpoint(cls, data: dict) -> "ConvexNet":
        if data.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"not a network checkpoint (format={data.get('format')!r})")
        if data.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {data.get('version')!r}")
        net = cls(NetSpec.from_dict(data["spec"]))
        pv = net.params()
        layout = [[s.name, list(s.shape)] for s in pv.layout]
        if layout != data["layout"]:
            raise CheckpointError("checkpoint layout does not match its spec")
        net.set_params(pv.with_values(decode_array(data["payload"], len(pv))))
        return net

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_checkpoint(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ConvexNet":
        return cls.from_checkpoint(json.loads(Path(path).read_text(encoding="utf-8")))


def encode_array(values: np.ndarray) -> str:
    return base64.b64encode(np.asarray(values, dtype="<f8").tobytes()).decode("ascii")


def decode_array(payload: str, size: int | None = None) -> np.ndarray:
    arr = np.frombuffer(base64.b64decode(payload), dtype="<f8").astype(np.float64)
    if size is not None and arr.size != size:
        raise CheckpointError(f"payload has {arr.size} values, expected {size}")
    return arr


# -- evaluation helpers ---------------------------------------------------


def _as_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a if a.dtype == DTYPE else a.to(DTYPE)
    return torch.as_tensor(np.asarray(a, dtype=np.float64), dtype=DTYPE)


def icnn_forward(net: ConvexNet, x) -> torch.Tensor:
    if net.kind != "icnn":
        raise ShapeMismatch("icnn_forward needs an ICNN")
    return net(_as_tensor(x))


def picnn_forward(net: ConvexNet, x, c) -> torch.Tensor:
    if net.kind != "picnn":
        raise ShapeMismatch("picnn_forward needs a PICNN")
    return net(_as_tensor(x), _as_tensor(c))


def transport(net: ConvexNet, x, c=None, *, create_graph: bool = False) -> torch.Tensor:
    """``grad_x net(x, c)``: the map carried by the potential."""
    x = _as_tensor(x)
    c = None if c is None else _as_tensor(c)
    return grad_wrt_input(net, x, c, create_graph=create_graph)


# -- constraints ---------------------------------------------------------


def convexity_penalty(net: ConvexNet, lam: float = 1.0) -> torch.Tensor:
    """``lam * sum_k ||max(-Wz_k, 0)||_F^2`` over the raw latent weights."""
    total = torch.zeros((), dtype=DTYPE)
    if net.spec.constraint_mode == "reparam":
        return total
    for W in net.z_weights():
        total = total + torch.relu(-W).pow(2).sum()
    return lam * total


def project_convex(net: ConvexNet) -> ConvexNet:
    """Zero every negative latent weight in place (clamp mode)."""
    if net.spec.constraint_mode != "clamp":
        raise ConfigError(f"project_convex requires constraint_mode='clamp', got {net.spec.constraint_mode!r}")
    with torch.no_grad():
        for W in net.z_weights():
            W.clamp_(min=0.0)
    return net


def min_z_weight(net: ConvexNet) -> float:
    vals = [float(net.effective_z_weight(int(n[2:])).detach().min()) for n in net.z_weight_names()]
    return min(vals) if vals else 0.0


# -- initialisation -------------------------------------------------------


@dataclass
class AnchorSet:
    """Contexts ``c_j`` with the affine map (or identity) attached to each."""

    contexts: np.ndarray
    maps: list[AffineMongeMap | None] = field(default_factory=list)

    def __post_init__(self):
        self.contexts = np.atleast_2d(np.asarray(self.contexts, dtype=np.float64))
        if self.contexts.shape[0] < 1:
            raise AnchorDimMismatch("need at least one anchor")
        if not self.maps:
            self.maps = [None] * self.contexts.shape[0]
        if len(self.maps) != self.contexts.shape[0]:
            raise AnchorDimMismatch("one map per anchor context is required")
        dims = {T.dim for T in self.maps if T is not None}
        if len(dims) > 1:
            raise AnchorDimMismatch(f"anchor maps disagree on dimension: {sorted(dims)}")

    def __len__(self) -> int:
        return self.contexts.shape[0]


def anchor_sharpness(contexts: np.ndarray, target_weight: float = 0.99, cap: float = 1e8) -> float:
    """Inverse temperature making each anchor win its own softmax with ``target_weight``."""
    C = np.atleast_2d(contexts)
    n = C.shape[0]
    if n < 2:
        return 1.0
    d2 = np.sum((C[:, None, :] - C[None, :, :]) ** 2, axis=-1)
    gaps = d2[~np.eye(n, dtype=bool)]
    gaps = gaps[gaps > 1e-12]
    if gaps.size == 0:
        return 1.0
    beta = 2.0 * math.log(target_weight / (1 - target_weight) * (n - 1)) / float(gaps.min())
    return float(min(max(beta, 1.0), cap))


class _Init:
    def __init__(self, seed: int):
        self.gen = torch.Generator().manual_seed(int(seed))

    def noise(self, shape, amplitude: float) -> torch.Tensor:
        return (2 * torch.rand(shape, generator=self.gen, dtype=DTYPE) - 1) * amplitude

    def near(self, shape, target: float) -> torch.Tensor:
        scale = abs(target) if target != 0 else _ZERO_SCALE
        return target + self.noise(shape, INIT_NOISE * scale)

    def near_rows(self, shape, target: float) -> torch.Tensor:
        """``target`` plus noise, each row rescaled to the exact target row sum."""
        W = self.near(shape, target)
        return W * (target * shape[1] / W.sum(dim=1, keepdim=True))

    def uniform(self, shape, bound: float) -> torch.Tensor:
        return self.noise(shape, bound)


def _set(net: ConvexNet, name: str, value) -> None:
    p = getattr(net, name)
    with torch.no_grad():
        p.copy_(torch.as_tensor(value, dtype=DTYPE).expand_as(p))


def _set_z(net: ConvexNet, k: int, value: torch.Tensor) -> None:
    if net.spec.constraint_mode == "reparam":
        value = torch.as_tensor(_inv_softplus(np.maximum(value.numpy(), 1e-12)), dtype=DTYPE)
    _set(net, f"Wz{k}", value)


def _set_quads(net: ConvexNet, quads: Sequence[QuadLayer]) -> None:
    _set(net, "quad_M", np.stack([q.M for q in quads]))
    _set(net, "quad_m", np.stack([q.m for q in quads]))


def init_icnn(spec: NetSpec, mode: str = "identity", moments: tuple[GaussianMoments, GaussianMoments] | None = None,
              seed: int = 0) -> ConvexNet:
    """Build an ICNN whose gradient starts as the identity, the Gaussian map, or random."""
    if spec.kind != "icnn":
        raise ConfigError("init_icnn needs an ICNN spec")
    init = _Init(seed)
    if mode == "vanilla":
        net = ConvexNet(NetSpec(**{**spec.to_dict(), "hidden": spec.hidden, "n_quad": 0, "context_hidden": None}))
        prev = spec.input_dim
        for k, w in enumerate(net.spec.widths):
            bound = 1.0 / math.sqrt(prev)
            if k > 0:
                _set_z(net, k, init.uniform((w, prev), bound).abs())
            _set(net, f"Wx{k}", init.uniform((w, spec.input_dim), 1.0 / math.sqrt(spec.input_dim)))
            _set(net, f"b{k}", init.uniform((w,), bound))
            prev = w
        return net
    if mode == "identity":
        quad = QuadLayer.identity(spec.input_dim)
    elif mode == "gaussian":
        if moments is None:
            raise MissingMoments("gaussian initialisation needs (source, target) moments")
        quad = QuadLayer.from_map(gaussian_monge_map(*moments))
    else:
        raise ConfigError(f"unknown ICNN init mode {mode!r}")
    net = ConvexNet(NetSpec(**{**spec.to_dict(), "hidden": spec.hidden, "n_quad": 1, "context_hidden": None}))
    _set_quads(net, [quad])
    s = linear_regime_bias(spec.activation)
    widths, prev, last = net.spec.widths, 1, net.spec.n_layers - 1
    for k, w in enumerate(widths):
        _set_z(net, k, init.near_rows((w, prev), 1.0 / prev))
        _set(net, f"Wx{k}", init.near((w, spec.input_dim), 0.0))
        _set(net, f"b{k}", -last * s if k == last else s)
        prev = w
    return net


def gaussian_anchors(contexts: np.ndarray, pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> AnchorSet:
    """Anchors whose maps are the closed-form Gaussian maps between each pair."""
    from .tensor_core import empirical_moments

    maps = [gaussian_monge_map(empirical_moments(src), empirical_moments(dst)) for src, dst in pairs]
    return AnchorSet(np.asarray(contexts), maps)


def init_picnn(spec: NetSpec, anchors: AnchorSet, mode: str = "gaussian", seed: int = 0) -> ConvexNet:
    """Anchor-based PICNN initialisation.

    ``u_0(c) = softmax(c M + m0)`` with ``M = beta [c_j]`` and
    ``m0_j = -beta ||c_j||^2 / 2``, i.e. a softmax over ``-beta/2 ||c - c_j||^2``
    that selects the nearest anchor; ``z_0 = [q_j(x)]_j`` with one quadratic
    layer per anchor, identity ``(I, 0)`` or the anchor's Gaussian ``(A_j, omega_j)``.
    """
    if spec.kind != "picnn":
        raise ConfigError("init_picnn needs a PICNN spec")
    if mode not in ("identity", "gaussian"):
        raise ConfigError(f"unknown PICNN init mode {mode!r}")
    C = anchors.contexts
    if C.shape[1] != spec.context_dim:
        raise AnchorDimMismatch(f"anchor contexts have dim {C.shape[1]}, spec expects {spec.context_dim}")
    n = len(anchors)
    d = spec.input_dim
    quads = []
    for T in anchors.maps:
        if T is not None and T.dim != d:
            raise AnchorDimMismatch(f"anchor map has dim {T.dim}, spec expects {d}")
        if mode == "identity" or T is None:
            quads.append(QuadLayer.identity(d))
        else:
            quads.append(QuadLayer.from_map(T))
    net = ConvexNet(NetSpec(**{**spec.to_dict(), "hidden": spec.hidden, "n_quad": n, "n_anchors": n,
                               "context_hidden": None}))
    init = _Init(seed)
    beta = anchor_sharpness(C)
    _set(net, "mod_M", beta * C.T)
    _set(net, "mod_b", -0.5 * beta * np.sum(C * C, axis=1))
    _set_quads(net, quads)
    for k in range(net.spec.n_layers - 1):
        _set(net, f"V{k}", torch.eye(n, dtype=DTYPE))
        _set(net, f"v{k}", 0.0)
    s = 0.0 if spec.activation != "softplus" else linear_regime_bias(spec.activation)
    widths, prev, last = net.spec.widths, n, net.spec.n_layers - 1
    for k, w in enumerate(widths):
        if k == 0:
            _set_z(net, 0, init.near_rows((w, n), 1.0))
            _set(net, "Wzu0", torch.eye(n, dtype=DTYPE))
            _set(net, "bz0", 0.0)
        else:
            _set_z(net, k, init.near_rows((w, prev), 1.0 / prev))
            _set(net, f"Wzu{k}", init.near((prev, n), 0.0))
            _set(net, f"bz{k}", 1.0)
        _set(net, f"Wx{k}", init.near((w, d), 0.0))
        _set(net, f"Wxu{k}", init.near((d, n), 0.0))
        _set(net, f"bx{k}", 1.0)
        _set(net, f"Wu{k}", init.near((w, n), 0.0))
        _set(net, f"bu{k}", -last * s if k == last else s)
        prev = w
    return net


def picnn_from_icnn(icnn: ConvexNet, context_dim: int, context_activation: str = "leaky_relu") -> ConvexNet:
    """Context-blind PICNN reproducing ``icnn`` exactly for every context."""
    s = icnn.spec
    spec = NetSpec("picnn", s.input_dim, context_dim, s.hidden, s.activation, context_activation,
                   s.constraint_mode, s.n_quad)
    net = ConvexNet(spec)
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
        if s.n_quad:
            _set(net, "quad_M", icnn.quad_M)
            _set(net, "quad_m", icnn.quad_m)
        for k in range(spec.n_layers):
            if hasattr(icnn, f"Wz{k}"):
                _set(net, f"Wz{k}", getattr(icnn, f"Wz{k}"))
                _set(net, f"bz{k}", 1.0)
            _set(net, f"Wx{k}", getattr(icnn, f"Wx{k}"))
            _set(net, f"bx{k}", 1.0)
            _set(net, f"bu{k}", getattr(icnn, f"b{k}"))
    return net
