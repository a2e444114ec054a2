"""Domain types and closed-form articulation math.

Vectors are plain ``numpy`` arrays of shape ``(3,)``. Rotations are unit
quaternions stored in ``(w, x, y, z)`` order. Every operation here is a pure
function of immutable values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Union

import numpy as np

AXIS_TOL = 1e-6


def wrap_angle(angle: float) -> float:
    """Map an angle in radians to the half-open interval (-pi, pi]."""
    angle = float(angle)
    if -math.pi < angle <= math.pi:
        return angle
    wrapped = math.pi - math.fmod(math.pi - float(angle), 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    elif wrapped > math.pi:
        wrapped -= 2.0 * math.pi
    return wrapped


def _as_vec3(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=float).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"{name} must have 3 components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {arr}")
    return arr


def _unit_axis(axis, tol: float = AXIS_TOL) -> np.ndarray:
    a = _as_vec3(axis, "axis")
    n = float(np.linalg.norm(a))
    if abs(n - 1.0) > tol:
        raise ValueError(f"axis must be unit length (got norm {n:.3g})")
    return a / n


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix ``[v]_x`` such that ``skew(v) @ w == cross(v, w)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rotation matrix ``I + sin(t) K + (1 - cos(t)) K^2`` for a unit axis."""
    k = skew(axis)
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


# -- quaternions -------------------------------------------------------------

def quat_multiply(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product, broadcasting over leading dimensions."""
    w1, x1, y1, z1 = np.moveaxis(np.asarray(q1, dtype=float), -1, 0)
    w2, x2, y2, z2 = np.moveaxis(np.asarray(q2, dtype=float), -1, 0)
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (normalized) quaternions of shape ``(..., 4)``."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


@dataclass(frozen=True, eq=False)
class Rotation:
    """A 3D rotation stored as a unit quaternion ``(w, x, y, z)``."""

    quat: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=float).reshape(-1)
        if q.shape != (4,) or not np.all(np.isfinite(q)):
            raise ValueError(f"quaternion must be 4 finite reals, got {q}")
        n = float(np.linalg.norm(q))
        if n < 1e-12:
            raise ValueError("zero quaternion is not a rotation")
        object.__setattr__(self, "quat", q / n)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    def as_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def apply(self, v) -> np.ndarray:
        return np.asarray(v, dtype=float) @ self.as_matrix().T

    def inverse(self) -> "Rotation":
        w, x, y, z = self.quat
        return Rotation(np.array([w, -x, -y, -z]))

    def __mul__(self, other: "Rotation") -> "Rotation":
        return Rotation(quat_multiply(self.quat, other.quat))


def axis_angle_rotation(axis, angle: float) -> Rotation:
    """Rotation by ``angle`` radians about the unit vector ``axis``.

    Raises:
        ValueError: if ``axis`` is not unit length within 1e-6.
    """
    a = _unit_axis(axis)
    half = 0.5 * float(angle)
    return Rotation(np.concatenate([[math.cos(half)], math.sin(half) * a]))


# -- articulations -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Revolute:
    """Rotation by ``angle`` about the line through ``pivot`` along ``axis``."""

    axis: np.ndarray
    pivot: np.ndarray
    angle: float

    def __post_init__(self):
        object.__setattr__(self, "axis", _unit_axis(self.axis))
        object.__setattr__(self, "pivot", _as_vec3(self.pivot, "pivot"))
        if not math.isfinite(self.angle):
            raise ValueError("angle must be finite")
        object.__setattr__(self, "angle", wrap_angle(self.angle))

    kind = "revolute"

    def rotation(self) -> Rotation:
        return axis_angle_rotation(self.axis, self.angle)

    def matrix(self) -> np.ndarray:
        return rodrigues(self.axis, self.angle)

    def scaled(self, t: float) -> "Revolute":
        return Revolute(self.axis, self.pivot, self.angle * t)

    @property
    def magnitude(self) -> float:
        return abs(self.angle)


@dataclass(frozen=True, eq=False)
class Prismatic:
    """Translation by ``distance`` along ``axis``."""

    axis: np.ndarray
    distance: float

    def __post_init__(self):
        object.__setattr__(self, "axis", _unit_axis(self.axis))
        if not math.isfinite(self.distance):
            raise ValueError("distance must be finite")
        object.__setattr__(self, "distance", float(self.distance))

    kind = "prismatic"

    def rotation(self) -> Rotation:
        return Rotation.identity()

    def matrix(self) -> np.ndarray:
        return np.eye(3)

    def scaled(self, t: float) -> "Prismatic":
        return Prismatic(self.axis, self.distance * t)

    @property
    def magnitude(self) -> float:
        return abs(self.distance)


Articulation = Union[Revolute, Prismatic]


def identity_articulation(kind: str = "revolute") -> Articulation:
    z = np.array([0.0, 0.0, 1.0])
    if kind == "revolute":
        return Revolute(z, np.zeros(3), 0.0)
    if kind == "prismatic":
        return Prismatic(z, 0.0)
    raise ValueError(f"unknown articulation kind {kind!r}")


def apply_points(art: Articulation, x: np.ndarray) -> np.ndarray:
    """Vectorized articulation of points of shape ``(..., 3)``."""
    x = np.asarray(x, dtype=float)
    if isinstance(art, Revolute):
        # R(x - p) + p
        return (x - art.pivot) @ art.matrix().T + art.pivot
    return x + art.distance * art.axis


def apply_point(art: Articulation, x) -> np.ndarray:
    """Move a single point by the articulation."""
    return apply_points(art, _as_vec3(x, "point"))


def invert(art: Articulation) -> Articulation:
    """The reverse motion, from state 1 back to state 0."""
    if isinstance(art, Revolute):
        return Revolute(art.axis, art.pivot, -art.angle)
    return Prismatic(art.axis, -art.distance)


def adjusted_view_direction(art: Articulation, d) -> np.ndarray:
    """Direction used to query an articulated Gaussian's color.

    The color coefficients are not rotated with the Gaussian, so the world
    view direction is mapped back through the inverse rotation.
    """
    d = np.asarray(d, dtype=float)
    if isinstance(art, Prismatic):
        return d.copy()
    return d @ art.matrix()  # row-vector form of R^T d


# -- Gaussians ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Gaussian:
    mean: np.ndarray
    orientation: Rotation
    scale: np.ndarray
    opacity: float
    color: np.ndarray
    sh1: np.ndarray | None = None
    state: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mean", _as_vec3(self.mean, "mean"))
        scale = _as_vec3(self.scale, "scale")
        if np.any(scale <= 0):
            raise ValueError(f"scale must be strictly positive, got {scale}")
        object.__setattr__(self, "scale", scale)
        if not (0.0 < self.opacity <= 1.0):
            raise ValueError(f"opacity must lie in (0, 1], got {self.opacity}")
        object.__setattr__(self, "color", _as_vec3(self.color, "color"))
        if self.sh1 is not None:
            sh1 = np.asarray(self.sh1, dtype=float).reshape(-1)
            if sh1.shape != (9,):
                raise ValueError("degree-1 color coefficients must have 9 entries")
            object.__setattr__(self, "sh1", sh1)
        if self.state not in (0, 1):
            raise ValueError(f"state must be 0 or 1, got {self.state}")

    def covariance(self) -> np.ndarray:
        rs = self.orientation.as_matrix() * self.scale
        return rs @ rs.T


def influence(g: Gaussian, x) -> float:
    """Opacity-scaled Gaussian kernel value of ``g`` at point ``x``."""
    if np.any(g.scale <= 0):
        raise ValueError("degenerate Gaussian scale")
    local = (_as_vec3(x, "point") - g.mean) @ g.orientation.as_matrix()
    z = local / g.scale
    return g.opacity * math.exp(-0.5 * float(z @ z))


def apply_gaussian(art: Articulation, g: Gaussian) -> Gaussian:
    """Articulate a Gaussian; scale, opacity and colors are left untouched."""
    return replace(
        g,
        mean=apply_point(art, g.mean),
        orientation=art.rotation() * g.orientation,
    )


def _ids_default() -> np.ndarray:
    return np.zeros(0, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class GaussianSet:
    """Struct-of-arrays container for an ordered collection of Gaussians."""

    means: np.ndarray
    quats: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    sh1: np.ndarray | None = None
    states: np.ndarray | None = None
    ids: np.ndarray = field(default_factory=_ids_default)

    def __post_init__(self):
        n = len(self.means)
        means = np.asarray(self.means, dtype=float).reshape(n, 3)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "quats", np.asarray(self.quats, dtype=float).reshape(n, 4))
        scales = np.asarray(self.scales, dtype=float).reshape(n, 3)
        if np.any(scales <= 0):
            raise ValueError("Gaussian scales must be strictly positive")
        object.__setattr__(self, "scales", scales)
        op = np.asarray(self.opacities, dtype=float).reshape(n)
        if np.any(op <= 0) or np.any(op > 1):
            raise ValueError("opacities must lie in (0, 1]")
        object.__setattr__(self, "opacities", op)
        object.__setattr__(self, "colors", np.asarray(self.colors, dtype=float).reshape(n, 3))
        if self.sh1 is not None:
            object.__setattr__(self, "sh1", np.asarray(self.sh1, dtype=float).reshape(n, 9))
        states = np.zeros(n, dtype=np.uint8) if self.states is None else self.states
        states = np.asarray(states, dtype=np.uint8).reshape(n)
        if np.any(states > 1):
            raise ValueError("states must be 0 or 1")
        object.__setattr__(self, "states", states)
        ids = np.arange(n, dtype=np.int64) if len(self.ids) == 0 and n else self.ids
        ids = np.asarray(ids, dtype=np.int64).reshape(n)
        if len(np.unique(ids)) != n:
            raise ValueError("Gaussian identities must be unique")
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(
            mean=self.means[i],
            orientation=Rotation(self.quats[i]),
            scale=self.scales[i],
            opacity=float(self.opacities[i]),
            color=self.colors[i],
            sh1=None if self.sh1 is None else self.sh1[i],
            state=int(self.states[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def from_gaussians(cls, gaussians: Iterable[Gaussian]) -> "GaussianSet":
        gs = list(gaussians)
        has_sh = any(g.sh1 is not None for g in gs)
        return cls(
            means=np.array([g.mean for g in gs]).reshape(-1, 3),
            quats=np.array([g.orientation.quat for g in gs]).reshape(-1, 4),
            scales=np.array([g.scale for g in gs]).reshape(-1, 3),
            opacities=np.array([g.opacity for g in gs]),
            colors=np.array([g.color for g in gs]).reshape(-1, 3),
            sh1=np.array([np.zeros(9) if g.sh1 is None else g.sh1 for g in gs]) if has_sh else None,
            states=np.array([g.state for g in gs], dtype=np.uint8),
        )

    def subset(self, index) -> "GaussianSet":
        index = np.asarray(index)
        return GaussianSet(
            means=self.means[index],
            quats=self.quats[index],
            scales=self.scales[index],
            opacities=self.opacities[index],
            colors=self.colors[index],
            sh1=None if self.sh1 is None else self.sh1[index],
            states=self.states[index],
            ids=self.ids[index],
        )

    def replace(self, **changes) -> "GaussianSet":
        return replace(self, **changes)

    def transformed(self, art: Articulation) -> "GaussianSet":
        """Vectorized :func:`apply_gaussian` over the whole set."""
        q = art.rotation().quat
        return replace(
            self,
            means=apply_points(art, self.means),
            quats=quat_multiply(q[None, :], self.quats),
        )

    def rotation_matrices(self) -> np.ndarray:
        return quat_to_matrix(self.quats)

    def covariances(self) -> np.ndarray:
        rs = self.rotation_matrices() * self.scales[:, None, :]
        return rs @ np.swapaxes(rs, 1, 2)


def concatenate(sets: Iterable[GaussianSet], renumber: bool = True) -> GaussianSet:
    sets = list(sets)
    has_sh = any(s.sh1 is not None for s in sets)
    sh1 = None
    if has_sh:
        sh1 = np.concatenate([s.sh1 if s.sh1 is not None else np.zeros((len(s), 9)) for s in sets])
    ids = np.concatenate([s.ids for s in sets])
    if renumber:
        ids = np.arange(len(ids), dtype=np.int64)
    return GaussianSet(
        means=np.concatenate([s.means for s in sets]),
        quats=np.concatenate([s.quats for s in sets]),
        scales=np.concatenate([s.scales for s in sets]),
        opacities=np.concatenate([s.opacities for s in sets]),
        colors=np.concatenate([s.colors for s in sets]),
        sh1=sh1,
        states=np.concatenate([s.states for s in sets]),
        ids=ids,
    )
