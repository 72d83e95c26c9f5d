"""Input- and parameter-gradients for the convex network family.

Backed by torch autograd in float64. Input gradients are built with
``create_graph=True`` so a loss containing them can be differentiated again
with respect to parameters (reverse-over-reverse). Only one level of input
gradient nesting is allowed. ``finite_diff_check`` is an independent central
difference oracle used to validate both routes.
"""

from __future__ import annotations

import contextlib
import contextvars
import re
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .errors import NestingTooDeep, UnsupportedPrimitive
from .tensor_core import rng_from_seed

DTYPE = torch.float64

MAX_NESTING = 1

_depth: contextvars.ContextVar[int] = contextvars.ContextVar("condot_input_grad_depth", default=0)

# autograd node names (minus the trailing "Backward<n>") produced by the
# supported primitives: affine maps, Hadamard products, softplus, (leaky) ReLU,
# sigmoid, softmax, squared norms, sums and means, plus shape plumbing.
SUPPORTED_NODES = frozenset({
    "AccumulateGrad", "Add", "Sub", "Rsub", "Mul", "Div", "Neg", "Mm", "Addmm", "Mv", "Addmv",
    "Bmm", "Baddbmm", "Matmul", "Dot", "T", "Transpose", "Permute", "View", "UnsafeView",
    "Reshape", "ReshapeAlias", "Unsqueeze", "Squeeze", "Expand", "Select", "Slice", "Index",
    "Cat", "Stack", "Clone", "Sum", "Mean", "Pow", "Softplus", "Relu", "LeakyRelu",
    "Threshold", "Sigmoid", "Softmax", "LogSoftmax", "ClampMin", "Clamp", "Log1P", "Exp",
    "Abs", "Linear", "Where", "Maximum", "Copy", "AsStrided",
    "Tanh", "Sqrt", "LinalgVectorNorm", "Norm", "Diag", "DiagEmbed",
})

_NODE_RE = re.compile(r"(Backward\d*)+$")


def _node_name(fn) -> str:
    return _NODE_RE.sub("", type(fn).__name__)


def check_primitives(out: torch.Tensor, stop: Iterable[torch.Tensor] = ()) -> None:
    """Raise ``UnsupportedPrimitive`` if ``out``'s graph uses an unknown op.

    Traversal stops at the graphs of the tensors in ``stop`` (typically the
    input point, which may itself come from an earlier gradient).
    """
    stop_nodes = {t.grad_fn for t in stop if t is not None and t.grad_fn is not None}
    seen = set()
    pending = [out.grad_fn] if out.grad_fn is not None else []
    while pending:
        fn = pending.pop()
        if fn is None or fn in seen or fn in stop_nodes:
            continue
        seen.add(fn)
        name = _node_name(fn)
        if name not in SUPPORTED_NODES:
            raise UnsupportedPrimitive(f"operation {type(fn).__name__!r} is not in the supported primitive set")
        pending.extend(nxt for nxt, _ in fn.next_functions)


@contextlib.contextmanager
def _nested():
    depth = _depth.get() + 1
    if depth > MAX_NESTING:
        raise NestingTooDeep(f"input-gradient nesting depth {depth} exceeds {MAX_NESTING}")
    token = _depth.set(depth)
    try:
        yield
    finally:
        _depth.reset(token)


def grad_wrt_input(
    f: Callable[[torch.Tensor, torch.Tensor | None], torch.Tensor],
    x: torch.Tensor,
    c: torch.Tensor | None = None,
    *,
    create_graph: bool = True,
    check: bool = True,
) -> torch.Tensor:
    """Gradient of ``f`` with respect to its first argument.

    ``f(x, c)`` may return one value per row of a batch ``x``; rows are treated
    as independent points, so the result has the shape of ``x``. With
    ``create_graph`` the result stays differentiable in the parameters of ``f``.
    """
    with _nested():
        x_in = x if x.requires_grad else x.detach().requires_grad_(True)
        with torch.enable_grad():
            out = f(x_in, c)
            if check:
                check_primitives(out, stop=(x_in, c))
            (g,) = torch.autograd.grad(out.sum(), x_in, create_graph=create_graph)
    return g


@dataclass(frozen=True)
class ParamSlot:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1


class ParamVector:
    """Flat float64 vector plus a layout table naming each parameter slice."""

    def __init__(self, values, layout: Sequence[ParamSlot]):
        self.values = np.asarray(values, dtype=np.float64).reshape(-1)
        self.layout = tuple(layout)
        covered = 0
        for slot in self.layout:
            if slot.offset != covered:
                raise ValueError(f"layout gap or overlap at {slot.name}")
            covered += slot.size
        if covered != self.values.size:
            raise ValueError(f"layout covers {covered} entries, vector has {self.values.size}")

    @staticmethod
    def layout_for(named: Sequence[tuple[str, torch.Tensor]]) -> tuple[ParamSlot, ...]:
        slots, offset = [], 0
        for name, p in named:
            slot = ParamSlot(name, offset, tuple(p.shape))
            slots.append(slot)
            offset += slot.size
        return tuple(slots)

    @classmethod
    def from_tensors(cls, named: Sequence[tuple[str, torch.Tensor]]) -> "ParamVector":
        layout = cls.layout_for(named)
        if named:
            values = np.concatenate([p.detach().cpu().numpy().reshape(-1) for _, p in named])
        else:
            values = np.zeros(0)
        return cls(values, layout)

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "ParamVector":
        return cls.from_tensors(list(module.named_parameters()))

    def __len__(self) -> int:
        return self.values.size

    def __getitem__(self, name: str) -> np.ndarray:
        for slot in self.layout:
            if slot.name == name:
                return self.values[slot.offset:slot.offset + slot.size].reshape(slot.shape)
        raise KeyError(name)

    def names(self) -> list[str]:
        return [s.name for s in self.layout]

    def copy_into(self, named: Sequence[tuple[str, torch.Tensor]]) -> None:
        if self.layout_for(named) != self.layout:
            raise ValueError("parameter layout mismatch")
        with torch.no_grad():
            for slot, (_, p) in zip(self.layout, named):
                chunk = self.values[slot.offset:slot.offset + slot.size].reshape(slot.shape)
                p.copy_(torch.as_tensor(chunk, dtype=p.dtype))

    def load_into(self, module: torch.nn.Module) -> None:
        self.copy_into(list(module.named_parameters()))

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)


def _named(params) -> list[tuple[str, torch.Tensor]]:
    if isinstance(params, torch.nn.Module):
        return list(params.named_parameters())
    params = list(params)
    if params and isinstance(params[0], tuple):
        return params
    return [(f"p{i}", p) for i, p in enumerate(params)]


def grad_wrt_params(loss_fn: Callable[[], torch.Tensor], params) -> ParamVector:
    """Gradient of the scalar returned by ``loss_fn`` for every parameter.

    ``params`` is a module, a list of tensors or a list of ``(name, tensor)``.
    Parameters the loss does not depend on get zero gradient.
    """
    named = _named(params)
    tensors = [p for _, p in named]
    with torch.enable_grad():
        loss = loss_fn()
        if torch.is_tensor(loss) and loss.requires_grad:
            grads = torch.autograd.grad(loss, tensors, allow_unused=True)
        else:
            grads = [None] * len(tensors)
    chunks = [
        (torch.zeros_like(p) if g is None else g).detach().cpu().numpy().reshape(-1)
        for p, g in zip(tensors, grads)
    ]
    values = np.concatenate(chunks) if chunks else np.zeros(0)
    return ParamVector(values, ParamVector.layout_for(named))


@dataclass(frozen=True)
class FDReport:
    max_rel_err: float
    worst_coordinate: str
    probes: tuple[tuple[str, float, float], ...] = ()


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(
    loss_fn: Callable[[], torch.Tensor],
    params,
    n_probe: int = 32,
    seed: int = 0,
    *,
    analytic: ParamVector | None = None,
    rel_step: float = 1e-5,
    floor: float = 1e-6,
) -> FDReport:
    """Compare analytic gradients with central differences on random coordinates.

    Step per coordinate is ``rel_step * (1 + |theta_i|)``. The relative error
    denominator is floored at ``floor`` times the largest analytic gradient
    entry (or ``floor`` itself when that is zero) so coordinates with
    vanishing gradient do not divide by round-off.
    """
    if n_probe < 1:
        raise ValueError("n_probe must be >= 1")
    named = _named(params)
    grad = analytic if analytic is not None else grad_wrt_params(loss_fn, named)
    layout = ParamVector.layout_for(named)
    total = sum(s.size for s in layout)
    if total == 0:
        return FDReport(0.0, "")
    rng = rng_from_seed(seed)
    picks = rng.choice(total, size=min(n_probe, total), replace=False)
    scale = float(np.max(np.abs(grad.values))) if grad.values.size else 0.0
    denom_floor = floor * scale if scale > 0 else floor
    worst, worst_name, probes = -1.0, "", []
    for flat in sorted(int(i) for i in picks):
        slot = next(s for s in layout if s.offset <= flat < s.offset + s.size)
        p = named[layout.index(slot)][1]
        local = flat - slot.offset
        view = p.data.view(-1)
        orig = float(view[local])
        h = rel_step * (1.0 + abs(orig))
        with torch.no_grad():
            view[local] = orig + h
            up = float(loss_fn())
            view[local] = orig - h
            down = float(loss_fn())
            view[local] = orig
        numeric = (up - down) / (2 * h)
        a = float(grad.values[flat])
        err = relative_error(a, numeric, denom_floor)
        label = f"{slot.name}[{local}]"
        probes.append((label, a, numeric))
        if err > worst:
            worst, worst_name = err, label
    return FDReport(worst, worst_name, tuple(probes))
