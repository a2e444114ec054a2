"""Per-Gaussian mobility and the static/mobile set assemblies.

A Gaussian with mobility ``m`` splits into a static component with opacity
``sigma * (1 - m)`` and a mobile component with opacity ``sigma * m``. The
assemblies below are pure views: they never modify their inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import expit

from .core import Articulation, GaussianSet, invert

STATIC, MOBILE = 0, 1


@dataclass(frozen=True, eq=False)
class MobilityField:
    """Mobility stored as unconstrained logits; ``m = logistic(logit)``."""

    logits: np.ndarray

    def __post_init__(self):
        lg = np.asarray(self.logits, dtype=float).reshape(-1)
        if not np.all(np.isfinite(lg)):
            raise ValueError("mobility logits must be finite")
        object.__setattr__(self, "logits", lg)

    @classmethod
    def fresh(cls, n: int) -> "MobilityField":
        """A field with every mobility at 0.5."""
        return cls(np.zeros(n))

    @classmethod
    def from_mobility(cls, m, eps: float = 1e-12) -> "MobilityField":
        m = np.clip(np.asarray(m, dtype=float), eps, 1 - eps)
        return cls(np.log(m) - np.log1p(-m))

    def __len__(self) -> int:
        return len(self.logits)

    @property
    def m(self) -> np.ndarray:
        return expit(self.logits)


@dataclass(frozen=True, eq=False)
class Block:
    """One contiguous block of a component assembly."""

    gaussians: GaussianSet
    weights: np.ndarray
    mobile: bool
    articulation: Articulation | None = None  # set when the block was moved


@dataclass(frozen=True, eq=False)
class ComponentSet:
    """Concatenated blocks viewed as a weighted point set of Gaussian means."""

    blocks: tuple[Block, ...]

    @cached_property
    def points(self) -> np.ndarray:
        if not self.blocks:
            return np.zeros((0, 3))
        return np.concatenate([b.gaussians.means for b in self.blocks])

    @cached_property
    def weights(self) -> np.ndarray:
        if not self.blocks:
            return np.zeros(0)
        return np.concatenate([b.weights for b in self.blocks])

    @property
    def tags(self) -> np.ndarray:
        return np.concatenate([np.full(len(b.weights), MOBILE if b.mobile else STATIC) for b in self.blocks])

    def __len__(self) -> int:
        return sum(len(b.weights) for b in self.blocks)

    def __add__(self, other: "ComponentSet") -> "ComponentSet":
        return ComponentSet(self.blocks + other.blocks)


def reference_set(gs: GaussianSet) -> ComponentSet:
    """The raw reconstruction: means weighted by plain opacity."""
    return ComponentSet((Block(gs, gs.opacities.copy(), mobile=False),))


def _check(gs: GaussianSet, M: MobilityField) -> None:
    if len(gs) != len(M):
        raise ValueError(f"mobility field has {len(M)} entries for {len(gs)} Gaussians")


def static_component(gs: GaussianSet, M: MobilityField) -> ComponentSet:
    _check(gs, M)
    return ComponentSet((Block(gs, gs.opacities * (1.0 - M.m), mobile=False),))


def mobile_component(gs: GaussianSet, M: MobilityField) -> ComponentSet:
    _check(gs, M)
    return ComponentSet((Block(gs, gs.opacities * M.m, mobile=True),))


def _check_state(l: int) -> None:
    if l not in (0, 1):
        raise ValueError(f"state must be 0 or 1, got {l!r}")


def cross_static(set0: GaussianSet, M0: MobilityField, set1: GaussianSet, M1: MobilityField) -> ComponentSet:
    """Static components of both states, state 0 block first."""
    return static_component(set0, M0) + static_component(set1, M1)


def cross_static_target(l: int, set0, M0, set1, M1) -> ComponentSet:
    _check_state(l)
    sets, fields = (set0, set1), (M0, M1)
    return cross_static(set0, M0, set1, M1) + mobile_component(sets[l], fields[l])


def transport(T: Articulation, l: int) -> Articulation:
    """Motion from state ``1 - l`` to state ``l`` given ``T`` from 0 to 1."""
    _check_state(l)
    return T if l == 1 else invert(T)


def _moved_mobile(l: int, sets, fields, T: Articulation) -> ComponentSet:
    other = 1 - l
    motion = transport(T, l)
    gs = sets[other]
    _check(gs, fields[other])
    block = Block(gs.transformed(motion), gs.opacities * fields[other].m, mobile=True, articulation=motion)
    return ComponentSet((block,))


def cross_mobile_target(l: int, set0, M0, set1, M1, T: Articulation) -> ComponentSet:
    _check_state(l)
    sets, fields = (set0, set1), (M0, M1)
    return cross_static_target(l, set0, M0, set1, M1) + _moved_mobile(l, sets, fields, T)


def mobile_only_pair(l: int, set0, M0, set1, M1, T: Articulation) -> tuple[ComponentSet, ComponentSet]:
    _check_state(l)
    sets, fields = (set0, set1), (M0, M1)
    return mobile_component(sets[l], fields[l]), _moved_mobile(l, sets, fields, T)


def binarize(M: MobilityField, threshold: float = 0.5) -> np.ndarray:
    """Part labels: MOBILE where ``m > threshold`` (ties are static)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return np.where(M.m > threshold, MOBILE, STATIC).astype(np.uint8)


def mobility_mean(*fields: MobilityField) -> float:
    """Regularizer value: mean mobility over every Gaussian of the fields."""
    return float(np.concatenate([f.m for f in fields]).mean())


def weight_logit_grad(opacities: np.ndarray, M: MobilityField, mobile: bool) -> np.ndarray:
    """d(weight)/d(logit) for the mobile (+) or static (-) component."""
    m = M.m
    g = opacities * m * (1.0 - m)
    return g if mobile else -g
