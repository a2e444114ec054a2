"""Parameter vectors, Adam, convergence detection and random restarts."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import Articulation, Prismatic, Revolute

log = logging.getLogger(__name__)

AXIS_MIN_NORM = 1e-8


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


class DegenerateAxisError(ArithmeticError):
    """Raised when the raw axis parameter collapses to (almost) zero."""


ARTICULATION_SLICES = {
    "revolute": (("axis", 3), ("pivot", 3), ("angle", 1)),
    "prismatic": (("axis", 3), ("distance", 1)),
}


def make_layout(kind: str | None, n_logits: tuple[int, ...] = ()) -> dict[str, slice]:
    """Slice layout for an articulation of ``kind`` followed by logit blocks."""
    entries: list[tuple[str, int]] = []
    if kind is not None:
        if kind not in ARTICULATION_SLICES:
            raise ValueError(f"unknown articulation kind {kind!r}")
        entries += list(ARTICULATION_SLICES[kind])
    entries += [(f"logits{i}", n) for i, n in enumerate(n_logits)]
    layout, start = {}, 0
    for name, size in entries:
        layout[name] = slice(start, start + size)
        start += size
    return layout


@dataclass
class ParamVector:
    values: np.ndarray
    layout: dict[str, slice]
    kind: str | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        size = max((s.stop for s in self.layout.values()), default=0)
        if size != len(self.values):
            raise ValueError(f"layout covers {size} entries, vector has {len(self.values)}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[self.layout[name]]

    def __contains__(self, name: str) -> bool:
        return name in self.layout

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), dict(self.layout), self.kind)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(np.array(values, dtype=float), dict(self.layout), self.kind)

    def articulation_part(self) -> "ParamVector":
        """A copy restricted to the articulation slices."""
        layout = make_layout(self.kind)
        vals = np.concatenate([self[name] for name in layout])
        return ParamVector(vals, layout, self.kind)


def articulation_params(art: Articulation) -> ParamVector:
    """Encode an articulation as a fresh parameter vector."""
    if isinstance(art, Revolute):
        vals = np.concatenate([art.axis, art.pivot, [art.angle]])
        return ParamVector(vals, make_layout("revolute"), "revolute")
    vals = np.concatenate([art.axis, [art.distance]])
    return ParamVector(vals, make_layout("prismatic"), "prismatic")


def extend(v: ParamVector, *logit_blocks: np.ndarray) -> ParamVector:
    """Articulation slices of ``v`` followed by the given logit blocks."""
    base = v.articulation_part() if v.kind is not None else ParamVector(np.zeros(0), {}, None)
    layout = make_layout(v.kind, tuple(len(b) for b in logit_blocks))
    return ParamVector(np.concatenate([base.values, *logit_blocks]), layout, v.kind)


def decode_axis(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit axis and its Jacobian ``d axis / d raw``."""
    n = float(np.linalg.norm(raw))
    if not n > AXIS_MIN_NORM:
        raise DegenerateAxisError(f"axis parameter norm {n:.3g} is too small")
    a = raw / n
    return a, (np.eye(3) - np.outer(a, a)) / n


def decode_articulation(v: ParamVector) -> Articulation:
    """Articulation encoded by ``v``; the angle is wrapped here, not earlier."""
    a, _ = decode_axis(v["axis"])
    if v.kind == "revolute":
        return Revolute(a, v["pivot"].copy(), float(v["angle"][0]))
    if v.kind == "prismatic":
        return Prismatic(a, float(v["distance"][0]))
    raise ValueError("parameter vector carries no articulation")


# -- Adam --------------------------------------------------------------------

@dataclass
class AdamState:
    lr: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0

    def __post_init__(self):
        self.lr = np.asarray(self.lr, dtype=float).reshape(-1)
        if self.m is None:
            self.m = np.zeros_like(self.lr)
        if self.v is None:
            self.v = np.zeros_like(self.lr)


def adam_state_for(params: ParamVector, lrs: dict[str, float], default_lr: float = 1e-2) -> AdamState:
    """Per-entry learning rates ``lrs[name]`` keyed by layout slice (or prefix)."""
    lr = np.full(len(params.values), default_lr)
    for name, sl in params.layout.items():
        key = name if name in lrs else ("logits" if name.startswith("logits") else name)
        lr[sl] = lrs.get(key, default_lr)
    return AdamState(lr=lr)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update; ``state`` is advanced in place."""
    grads = np.asarray(grads, dtype=float)
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads))
        raise NonFiniteError(f"non-finite gradient at step {state.t + 1}, entries {bad[:10].tolist()}")
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = state.m / (1 - state.beta1 ** state.t)
    v_hat = state.v / (1 - state.beta2 ** state.t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass(frozen=True)
class ConvergenceCriterion:
    window: int = 50
    rel_tol: float = 1e-4
    max_iters: int = 5000

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("convergence window must be at least 2")
        if not self.rel_tol > 0:
            raise ValueError("relative tolerance must be positive")

    def converged(self, trace: list[float]) -> bool:
        if len(trace) <= self.window:
            return False
        old, new = trace[-1 - self.window], trace[-1]
        return abs(old - new) <= self.rel_tol * max(abs(old), 1e-300)


@dataclass
class OptimizeResult:
    params: ParamVector
    loss: float
    trace: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    error: str | None = None

    @property
    def initial_loss(self) -> float:
        return self.trace[0] if self.trace else math.nan


LossFn = Callable[[ParamVector], tuple[float, np.ndarray]]


def optimize(
    loss: LossFn,
    init: ParamVector,
    criterion: ConvergenceCriterion = ConvergenceCriterion(),
    lrs: dict[str, float] | None = None,
    project: Callable[[ParamVector], None] | None = None,
) -> OptimizeResult:
    """Minimize ``loss`` with Adam until the loss stops changing.

    ``loss`` returns ``(value, gradient)``. The best parameters seen are
    returned. A non-finite loss or gradient aborts the run; the result then
    carries the best-so-far parameters and an ``error`` message.
    """
    state = adam_state_for(init, lrs or {})
    params = init.copy()
    best, best_loss = params.copy(), math.inf
    trace: list[float] = []
    error = None
    converged = False
    for _ in range(criterion.max_iters + 1):
        try:
            value, grad = loss(params)
        except (NonFiniteError, DegenerateAxisError) as exc:
            error = str(exc)
            break
        if not math.isfinite(value):
            error = f"non-finite loss at iteration {len(trace)}"
            break
        trace.append(float(value))
        if value < best_loss:
            best, best_loss = params.copy(), float(value)
        if criterion.converged(trace):
            converged = True
            break
        if len(trace) > criterion.max_iters:
            break
        try:
            params.values = adam_step(state, params.values, grad)
        except NonFiniteError as exc:
            error = str(exc)
            break
        if project is not None:
            project(params)
    if error:
        log.warning("optimization aborted: %s", error)
    return OptimizeResult(best, best_loss, trace, max(len(trace) - 1, 0), converged, error)


# -- random restarts -----------------------------------------------------------

def random_unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    out = np.empty((n, 3))
    for i in range(n):
        v = rng.standard_normal(3)
        while np.linalg.norm(v) < AXIS_MIN_NORM:
            v = rng.standard_normal(3)
        out[i] = v / np.linalg.norm(v)
    return out


def random_init(kind: str, bounds: tuple[np.ndarray, np.ndarray], rng: np.random.Generator) -> ParamVector:
    """Random articulation parameters inside the scene bounding box.

    Axis uniform on the sphere, pivot uniform in the box, angle uniform in
    (-pi, pi], distance uniform in [-D, D] with D the box diagonal.
    """
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    axis = random_unit_vectors(rng, 1)[0]
    if kind == "revolute":
        pivot = lo + rng.random(3) * (hi - lo)
        angle = math.pi - 2.0 * math.pi * rng.random()
        return ParamVector(np.concatenate([axis, pivot, [angle]]), make_layout("revolute"), "revolute")
    if kind == "prismatic":
        diag = float(np.linalg.norm(hi - lo))
        dist = diag * (2.0 * rng.random() - 1.0)
        return ParamVector(np.concatenate([axis, [dist]]), make_layout("prismatic"), "prismatic")
    raise ValueError(f"unknown articulation kind {kind!r}")
