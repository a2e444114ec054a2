"""Synthetic two-state articulated scenes with ground truth.

Each archetype is a set of analytic surface patches for a static part and a
mobile part. Both states are sampled independently, so the two Gaussian sets
share no point correspondences. Surfaces hidden in a state (contact faces,
regions behind a panel, the inside of a closed drawer) are not sampled in it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import Articulation, GaussianSet, Prismatic, Revolute, apply_points
from .render import Camera

ARCHETYPES = ("hinge", "drawer", "flat-slider", "two-end-pen")
DEFAULT_MAGNITUDE = {"hinge": math.radians(60.0), "drawer": 0.3, "flat-slider": 0.25, "two-end-pen": 0.25}


# -- surface primitives ------------------------------------------------------

class Surface:
    area: float

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """``n`` uniform points and their unit normals."""
        raise NotImplementedError

    def distance(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class Rect(Surface):
    """Parallelogram ``origin + s*u + t*v`` for ``s, t`` in [0, 1]."""

    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray

    @property
    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.u, self.v)))

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.u, self.v)
        return n / np.linalg.norm(n)

    def sample(self, n, rng):
        st = rng.random((n, 2))
        pts = self.origin + st[:, :1] * self.u + st[:, 1:] * self.v
        return pts, np.tile(self.normal, (n, 1))

    def distance(self, x):
        # u and v are orthogonal for every rectangle built here
        rel = np.asarray(x, dtype=float) - self.origin
        uu, vv = self.u @ self.u, self.v @ self.v
        s = np.clip(rel @ self.u / uu, 0.0, 1.0)
        t = np.clip(rel @ self.v / vv, 0.0, 1.0)
        foot = self.origin + s[:, None] * self.u + t[:, None] * self.v
        return np.linalg.norm(np.asarray(x) - foot, axis=1)


def _segment_distance(x: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip((x - a) @ ab / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(x - (a + t[:, None] * ab), axis=1)


@dataclass(frozen=True)
class Triangle(Surface):
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    @property
    def area(self) -> float:
        return 0.5 * float(np.linalg.norm(np.cross(self.b - self.a, self.c - self.a)))

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.b - self.a, self.c - self.a)
        return n / np.linalg.norm(n)

    def sample(self, n, rng):
        r1, r2 = rng.random(n), rng.random(n)
        s = np.sqrt(r1)
        pts = ((1 - s)[:, None] * self.a + (s * (1 - r2))[:, None] * self.b + (s * r2)[:, None] * self.c)
        return pts, np.tile(self.normal, (n, 1))

    def distance(self, x):
        x = np.asarray(x, dtype=float)
        nrm = self.normal
        h = (x - self.a) @ nrm
        foot = x - h[:, None] * nrm
        # barycentric inside test on the plane
        v0, v1, v2 = self.b - self.a, self.c - self.a, foot - self.a
        d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
        d20, d21 = v2 @ v0, v2 @ v1
        den = d00 * d11 - d01 * d01
        v = (d11 * d20 - d01 * d21) / den
        w = (d00 * d21 - d01 * d20) / den
        inside = (v >= 0) & (w >= 0) & (v + w <= 1)
        edge = np.minimum(np.minimum(_segment_distance(x, self.a, self.b), _segment_distance(x, self.b, self.c)),
                          _segment_distance(x, self.c, self.a))
        return np.where(inside, np.abs(h), edge)


def quad(p0, p1, p2, p3) -> list[Triangle]:
    """Planar quadrilateral ``p0 p1 p2 p3`` (in order) as two triangles."""
    p0, p1, p2, p3 = (np.asarray(p, dtype=float) for p in (p0, p1, p2, p3))
    return [Triangle(p0, p1, p2), Triangle(p0, p2, p3)]


def _frame(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = axis / np.linalg.norm(axis)
    helper = np.array([0.0, 0.0, 1.0]) if abs(a[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(a, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(a, e1)


@dataclass(frozen=True)
class Disk(Surface):
    center: np.ndarray
    normal: np.ndarray
    radius: float

    @property
    def area(self) -> float:
        return math.pi * self.radius**2

    def sample(self, n, rng):
        e1, e2 = _frame(self.normal)
        r = self.radius * np.sqrt(rng.random(n))
        phi = 2 * math.pi * rng.random(n)
        pts = self.center + (r * np.cos(phi))[:, None] * e1 + (r * np.sin(phi))[:, None] * e2
        nrm = self.normal / np.linalg.norm(self.normal)
        return pts, np.tile(nrm, (n, 1))

    def distance(self, x):
        a = self.normal / np.linalg.norm(self.normal)
        rel = np.asarray(x, dtype=float) - self.center
        h = rel @ a
        radial = np.linalg.norm(rel - h[:, None] * a, axis=1)
        return np.hypot(h, np.maximum(radial - self.radius, 0.0))


@dataclass(frozen=True)
class Tube(Surface):
    """Lateral surface of a cylinder from ``start`` along unit ``axis``."""

    start: np.ndarray
    axis: np.ndarray
    length: float
    radius: float

    @property
    def area(self) -> float:
        return 2 * math.pi * self.radius * self.length

    def sample(self, n, rng):
        e1, e2 = _frame(self.axis)
        h = self.length * rng.random(n)
        phi = 2 * math.pi * rng.random(n)
        radial = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
        return self.start + h[:, None] * self.axis + self.radius * radial, radial

    def distance(self, x):
        rel = np.asarray(x, dtype=float) - self.start
        h = rel @ self.axis
        radial = np.linalg.norm(rel - h[:, None] * self.axis, axis=1)
        over = np.maximum(np.maximum(-h, h - self.length), 0.0)
        return np.hypot(radial - self.radius, over)


def _v(*c) -> np.ndarray:
    return np.array(c, dtype=float)


def box_faces(lo, hi, skip: Sequence[str] = ()) -> list[Rect]:
    """Outward faces of an axis-aligned box; names are ``"-x"``, ``"+x"``, etc."""
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    ext = hi - lo
    faces = []
    for ax, name in enumerate("xyz"):
        i, j = (ax + 1) % 3, (ax + 2) % 3
        ui, vj = np.zeros(3), np.zeros(3)
        ui[i], vj[j] = ext[i], ext[j]
        for side, base in (("-", lo), ("+", hi)):
            if side + name in skip:
                continue
            origin = lo.copy()
            origin[ax] = base[ax]
            faces.append(Rect(origin, ui, vj) if side == "+" else Rect(origin, vj, ui))
    return faces


def face_with_hole(ax: int, level: float, lo2, hi2, hole_lo, hole_hi) -> list[Rect]:
    """Axis-aligned face at coordinate ``level`` on axis ``ax`` minus a rectangular hole.

    ``lo2``/``hi2`` and the hole bounds are given in the two remaining axes,
    in cyclic order after ``ax``.
    """
    i, j = (ax + 1) % 3, (ax + 2) % 3
    out = []
    a0, a1 = lo2[0], hi2[0]
    b0, b1 = lo2[1], hi2[1]
    h0, h1 = hole_lo, hole_hi

    def rect(s0, s1, t0, t1):
        if s1 - s0 <= 0 or t1 - t0 <= 0:
            return
        o = np.zeros(3)
        o[ax], o[i], o[j] = level, s0, t0
        u, v = np.zeros(3), np.zeros(3)
        u[i], v[j] = s1 - s0, t1 - t0
        out.append(Rect(o, u, v))

    rect(a0, h0[0], b0, b1)
    rect(h1[0], a1, b0, b1)
    rect(h0[0], h1[0], b0, h0[1])
    rect(h0[0], h1[0], h1[1], b1)
    return out


# -- archetypes ---------------------------------------------------------------

@dataclass(frozen=True)
class ArchetypeSpec:
    kind: str = "hinge"
    n_static: int = 2000
    n_mobile: int = 800
    noise: float = 0.005
    magnitude: float | None = None  # radians (revolute) or world units (prismatic)
    seed: int = 0
    n_cameras: int = 8
    resolution: int = 64
    custom: "Geometry | None" = None

    def __post_init__(self):
        if self.kind not in ARCHETYPES + ("custom",):
            raise ValueError(f"unknown archetype {self.kind!r}")
        if self.kind == "custom" and self.custom is None:
            raise ValueError("custom archetype needs a geometry")
        if self.n_static < 10 or self.n_mobile < 10:
            raise ValueError("each part needs at least 10 Gaussians")
        if not self.noise >= 0:
            raise ValueError("noise must be nonnegative")

    @property
    def resolved_magnitude(self) -> float:
        if self.magnitude is not None:
            return float(self.magnitude)
        return DEFAULT_MAGNITUDE.get(self.kind, 0.0)


@dataclass(frozen=True)
class Geometry:
    """Surfaces per state in raw coordinates.

    ``mobile[l]`` is given in the mobile part's state-0 pose and is moved by
    ``articulation`` when sampled for state 1.
    """

    static: tuple[list[Surface], list[Surface]]
    mobile: tuple[list[Surface], list[Surface]]
    articulation: Articulation
    static_color: np.ndarray = field(default_factory=lambda: _v(0.6, 0.6, 0.65))
    mobile_color: np.ndarray = field(default_factory=lambda: _v(0.85, 0.35, 0.2))


def hinge_geometry(angle: float) -> Geometry:
    base = box_faces(_v(-0.4, -0.3, 0.0), _v(0.4, 0.3, 0.04))
    # Lid: wedge profile (thick at the hinge) and a trapezoidal outline with
    # one slanted side. A uniform, mirror-symmetric slab would map onto itself
    # under half-turns, leaving the motion geometrically ambiguous.
    y_back, z0, z1 = 0.30, 0.04, 0.54
    yf0, yf1 = 0.25, 0.285
    xl, xr0, xr1 = -0.4, 0.4, 0.2
    B = [_v(xl, y_back, z0), _v(xr0, y_back, z0), _v(xr1, y_back, z1), _v(xl, y_back, z1)]
    F = [_v(xl, yf0, z0), _v(xr0, yf0, z0), _v(xr1, yf1, z1), _v(xl, yf1, z1)]
    screen: list[Surface] = []
    screen += quad(B[0], B[3], B[2], B[1])  # back, +y
    screen += quad(F[0], F[1], F[2], F[3])  # front
    screen += quad(F[3], F[2], B[2], B[3])  # top
    screen += quad(B[0], F[0], F[3], B[3])  # left side
    screen += quad(F[1], B[1], B[2], F[2])  # slanted right side
    art = Revolute(_v(1, 0, 0), _v(0.0, y_back, z0), -angle)
    return Geometry((base, base), (screen, screen), art)


def drawer_geometry(distance: float) -> Geometry:
    lo, hi = _v(-0.3, -0.3, -0.3), _v(0.3, 0.3, 0.3)
    cabinet = box_faces(lo, hi, skip=("+x",))
    cabinet += face_with_hole(0, 0.3, (-0.3, -0.3), (0.3, 0.3), (-0.28, -0.28), (0.28, 0.28))
    panel = box_faces(_v(0.3, -0.29, -0.29), _v(0.33, 0.29, 0.29), skip=("-x",))
    # drawer body sides in the closed pose; only the part pulled out is visible
    body = box_faces(_v(0.3 - distance, -0.28, -0.28), _v(0.3, 0.28, 0.28), skip=("-x", "+x"))
    art = Prismatic(_v(1, 0, 0), distance)
    return Geometry((cabinet, cabinet), (panel, panel + body), art)


def flat_slider_geometry(distance: float) -> Geometry:
    lo, hi = _v(-0.3, -0.2, -0.25), _v(0.3, 0.2, 0.25)
    px, z0, z1, gap = (-0.15, 0.15), 0.04, 0.14, 0.04
    # plate flush with the +y face, sliding in a slot that spans the whole travel
    plate = [Rect(_v(px[0], hi[1], z0), _v(0, 0, z1 - z0), _v(px[1] - px[0], 0, 0))]
    body = box_faces(lo, hi, skip=("+y",))
    # face axis 1, in-plane (z, x)
    slot_lo = (max(z0 - distance - gap, lo[2] + 0.01), px[0] - gap)
    front = face_with_hole(1, hi[1], (lo[2], lo[0]), (hi[2], hi[0]), slot_lo, (z1 + gap, px[1] + gap))
    static = body + front
    art = Prismatic(_v(0, 0, -1), distance)
    return Geometry((static, static), (plate, plate), art)


def two_end_pen_geometry(distance: float) -> Geometry:
    R, ex = 0.1, _v(1, 0, 0)
    barrel = [Tube(_v(-0.5, 0, 0), ex, 1.0, R)]
    L = distance
    cap = Disk(_v(0.5 + L, 0, 0), ex, R)
    end_a = [Tube(_v(0.5, 0, 0), ex, L, R), cap]
    # state 1 shows the rod's other end (pushed out at the open left side)
    # and the cap, which then sits flush with the barrel end
    end_b = [Tube(_v(-0.5, 0, 0), ex, L, R), cap]
    art = Prismatic(-ex, L)
    return Geometry((barrel, barrel), (end_a, end_b), art)


def archetype_geometry(spec: ArchetypeSpec) -> Geometry:
    mag = spec.resolved_magnitude
    if spec.kind == "hinge":
        return hinge_geometry(mag)
    if spec.kind == "drawer":
        return drawer_geometry(mag)
    if spec.kind == "flat-slider":
        return flat_slider_geometry(mag)
    if spec.kind == "two-end-pen":
        return two_end_pen_geometry(mag)
    return spec.custom


# -- scenes -------------------------------------------------------------------

@dataclass(frozen=True)
class Truth:
    articulation: Articulation
    labels0: np.ndarray
    labels1: np.ndarray
    cameras0: tuple[Camera, ...] = ()
    cameras1: tuple[Camera, ...] = ()


@dataclass(frozen=True)
class Scene:
    set0: GaussianSet
    set1: GaussianSet
    truth: Truth | None = None
    # normalized = (raw - center) / scale
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        if self.truth is not None:
            if len(self.truth.labels0) != len(self.set0) or len(self.truth.labels1) != len(self.set1):
                raise ValueError("truth labels do not match set cardinalities")

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        pts = np.concatenate([self.set0.means, self.set1.means])
        return pts.min(axis=0), pts.max(axis=0)

    def to_raw(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) * self.scale + self.center


def _allocate(total: int, areas: Sequence[float]) -> np.ndarray:
    """Largest-remainder split of ``total`` samples proportional to ``areas``."""
    a = np.asarray(areas, dtype=float)
    exact = total * a / a.sum()
    counts = np.floor(exact).astype(int)
    rest = total - counts.sum()
    counts[np.argsort(-(exact - counts), kind="stable")[:rest]] += 1
    return counts


def sample_surfaces(surfaces: Sequence[Surface], n: int, rng: np.random.Generator):
    counts = _allocate(n, [s.area for s in surfaces])
    pts, nrm = [], []
    for s, c in zip(surfaces, counts):
        if c:
            p, q = s.sample(int(c), rng)
            pts.append(p)
            nrm.append(q)
    return np.concatenate(pts), np.concatenate(nrm)


def _orientations_from_normals(normals: np.ndarray) -> np.ndarray:
    """Quaternions (wxyz) rotating +z onto each normal."""
    z = np.array([0.0, 0.0, 1.0])
    out = np.zeros((len(normals), 4))
    for i, n in enumerate(normals):
        c = float(n @ z)
        axis = np.cross(z, n)
        s = np.linalg.norm(axis)
        if s < 1e-12:
            out[i] = (1, 0, 0, 0) if c > 0 else (0, 1, 0, 0)
            continue
        half = 0.5 * math.atan2(s, c)
        out[i, 0] = math.cos(half)
        out[i, 1:] = math.sin(half) * axis / s
    return out


def _part_gaussians(pts, normals, area, n, noise, color, state, rng) -> dict:
    spacing = math.sqrt(area / max(n, 1))
    pts = pts + noise * rng.standard_normal(pts.shape)
    return dict(
        means=pts,
        quats=_orientations_from_normals(normals),
        scales=np.full((len(pts), 3), spacing),
        opacities=0.5 + 0.5 * rng.random(len(pts)) * (1 - 1e-9),
        colors=np.clip(color + 0.03 * rng.standard_normal((len(pts), 3)), 0, 1),
        sh1=0.05 * rng.standard_normal((len(pts), 9)),
        states=np.full(len(pts), state, dtype=np.uint8),
    )


def default_cameras(n: int, resolution: int, radius: float = 3.0) -> tuple[Camera, ...]:
    """Cameras on two elevation rings around the origin, looking at it."""
    cams = []
    f = 1.5 * resolution
    for k in range(n):
        elev = math.radians(20.0 if k % 2 == 0 else 45.0)
        az = 2 * math.pi * k / n + 0.3
        eye = radius * np.array([math.cos(elev) * math.cos(az), math.cos(elev) * math.sin(az), math.sin(elev)])
        cams.append(Camera.look_at(eye, fx=f, width=resolution, height=resolution))
    return tuple(cams)


def _normalize_frame(points: np.ndarray) -> tuple[np.ndarray, float]:
    lo, hi = points.min(axis=0), points.max(axis=0)
    center = 0.5 * (lo + hi)
    s = float(np.max(np.linalg.norm(points - center, axis=1)))
    return center, (s * (1 + 1e-12) if s > 0 else 1.0)


def _map_articulation(art: Articulation, center: np.ndarray, scale: float) -> Articulation:
    if isinstance(art, Revolute):
        return Revolute(art.axis, (art.pivot - center) / scale, art.angle)
    return Prismatic(art.axis, art.distance / scale)


def denormalize_articulation(art: Articulation, center: np.ndarray, scale: float) -> Articulation:
    """Inverse of the normalization map for articulations."""
    if isinstance(art, Revolute):
        return Revolute(art.axis, np.asarray(art.pivot) * scale + center, art.angle)
    return Prismatic(art.axis, art.distance * scale)


def _map_camera(cam: Camera, center: np.ndarray, scale: float) -> Camera:
    m = cam.world_to_cam.copy()
    m[:3, 3] = (cam.rotation @ center + cam.translation) / scale
    return replace(cam, world_to_cam=m)


def normalize(set0: GaussianSet, set1: GaussianSet, truth: Truth | None = None) -> Scene:
    """Center the union of means at its bounding-box midpoint and scale it into the unit ball."""
    center, scale = _normalize_frame(np.concatenate([set0.means, set1.means]))

    def m(gs):
        return gs.replace(means=(gs.means - center) / scale, scales=gs.scales / scale)

    if truth is not None:
        truth = replace(
            truth,
            articulation=_map_articulation(truth.articulation, center, scale),
            cameras0=tuple(_map_camera(c, center, scale) for c in truth.cameras0),
            cameras1=tuple(_map_camera(c, center, scale) for c in truth.cameras1),
        )
    return Scene(m(set0), m(set1), truth, center, scale)


def generate(spec: ArchetypeSpec) -> Scene:
    """Sample both states of an archetype; deterministic in ``spec.seed``."""
    geo = archetype_geometry(spec)
    ss = np.random.SeedSequence(spec.seed)
    rngs = [np.random.default_rng(s) for s in ss.spawn(2)]
    # rough normalization scale so that noise is expressed in normalized units
    probe_rng = np.random.default_rng(ss.spawn(1)[0])
    probe = np.concatenate([sample_surfaces(geo.static[0] + geo.mobile[0], 500, probe_rng)[0],
                            apply_points(geo.articulation, sample_surfaces(geo.mobile[1], 200, probe_rng)[0])])
    _, approx_scale = _normalize_frame(probe)
    sets, labels = [], []
    for l, rng in enumerate(rngs):
        parts = []
        for surfaces, n, color, lab in ((geo.static[l], spec.n_static, geo.static_color, 0),
                                        (geo.mobile[l], spec.n_mobile, geo.mobile_color, 1)):
            pts, nrm = sample_surfaces(surfaces, n, rng)
            area = sum(s.area for s in surfaces)
            if lab == 1 and l == 1:
                pts = apply_points(geo.articulation, pts)
                nrm = nrm @ geo.articulation.matrix().T
            parts.append((_part_gaussians(pts, nrm, area, n, spec.noise * approx_scale, color, l, rng), lab))
        merged = {k: np.concatenate([p[k] for p, _ in parts]) for k in parts[0][0]}
        sets.append(GaussianSet(**merged))
        labels.append(np.concatenate([np.full(len(p["means"]), lab, dtype=np.uint8) for p, lab in parts]))
    truth = Truth(geo.articulation, labels[0], labels[1])
    scene = normalize(sets[0], sets[1], truth)
    cams = default_cameras(spec.n_cameras, spec.resolution)
    return replace(scene, truth=replace(scene.truth, cameras0=cams, cameras1=cams))


def surfaces_normalized_distance(scene: Scene, surfaces: Sequence[Surface], x: np.ndarray,
                                 articulation: Articulation | None = None) -> np.ndarray:
    """Distance (normalized units) from normalized points to raw-frame surfaces,
    optionally moved by a raw-frame articulation first."""
    raw = scene.to_raw(x)
    if articulation is not None:
        from .core import invert

        raw = apply_points(invert(articulation), raw)
    d = np.min(np.stack([s.distance(raw) for s in surfaces]), axis=0)
    return d / scene.scale


def perturb(scene: Scene, dropout: float, noise: float, rng: np.random.Generator) -> Scene:
    """Drop a random fraction of each state's Gaussians and jitter the rest.

    The truth articulation and cameras are unchanged; labels follow their
    surviving Gaussians.
    """
    if not 0.0 <= dropout < 1.0:
        raise ValueError("dropout fraction must lie in [0, 1)")
    if noise < 0:
        raise ValueError("noise must be nonnegative")
    out, labels = [], []
    truth_labels = (None, None) if scene.truth is None else (scene.truth.labels0, scene.truth.labels1)
    for gs, lab in zip((scene.set0, scene.set1), truth_labels):
        keep = np.flatnonzero(rng.random(len(gs)) >= dropout)
        if len(keep) == 0:
            keep = np.array([int(rng.integers(len(gs)))])
        sub = gs.subset(keep)
        if noise > 0:
            sub = sub.replace(means=sub.means + noise * rng.standard_normal(sub.means.shape))
        out.append(sub)
        labels.append(None if lab is None else lab[keep])
    truth = scene.truth
    if truth is not None:
        truth = replace(truth, labels0=labels[0], labels1=labels[1])
    return replace(scene, set0=out[0], set1=out[1], truth=truth)
