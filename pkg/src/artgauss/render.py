"""Forward splatting rasterizer for color, depth and part segmentation.

Pixel ``(row i, column j)`` has its center at image coordinates ``(u, v) =
(j, i)``. Cameras follow the pinhole convention with +z looking forward, +x
right and +y down.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import GaussianSet, adjusted_view_direction
from .mobility import Block, ComponentSet, MobilityField, static_component

NEAR = 1e-4
ALPHA_MAX = 0.999
T_MIN = 1e-4
SH_C1 = 0.4886025119029199
DEPTH_MIN_ALPHA = 1e-3

BACKGROUND, STATIC_LABEL, MOBILE_LABEL = 0, 1, 2
SEG_PALETTE = np.array([[0, 0, 0], [160, 160, 160], [220, 40, 40]], dtype=np.uint8)


@dataclass(frozen=True, eq=False)
class Camera:
    world_to_cam: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        m = np.asarray(self.world_to_cam, dtype=float).reshape(4, 4)
        r = m[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or np.linalg.det(r) <= 0:
            raise ValueError("world_to_cam must be a rigid transform")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("resolution must be at least 1x1")
        object.__setattr__(self, "world_to_cam", m)

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), *, fx: float = 96.0,
                fy: float | None = None, width: int = 64, height: int = 64) -> "Camera":
        """Camera at ``eye`` looking at ``target`` with principal point at the image center."""
        eye, target, up = (np.asarray(v, dtype=float) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, [1.0, 0.0, 0.0] if abs(z[0]) < 0.9 else [0.0, 1.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        m = np.eye(4)
        m[:3, :3] = np.stack([x, y, z])
        m[:3, 3] = -m[:3, :3] @ eye
        return cls(m, fx, fx if fy is None else fy, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


@dataclass
class RenderOutput:
    color: np.ndarray  # (h, w, 3)
    depth: np.ndarray  # (h, w), +inf where nothing was hit
    segmentation: np.ndarray  # (h, w) uint8: 0 background, 1 static, 2 mobile
    alpha: np.ndarray  # (h, w)


def _project_batch(means: np.ndarray, covs: np.ndarray, cam: Camera):
    R, t = cam.rotation, cam.translation
    pc = means @ R.T + t
    z = pc[:, 2]
    front = z > NEAR
    zz = np.where(front, z, 1.0)
    u = cam.fx * pc[:, 0] / zz + cam.cx
    v = cam.fy * pc[:, 1] / zz + cam.cy
    J = np.zeros((len(means), 2, 3))
    J[:, 0, 0] = cam.fx / zz
    J[:, 0, 2] = -cam.fx * pc[:, 0] / zz**2
    J[:, 1, 1] = cam.fy / zz
    J[:, 1, 2] = -cam.fy * pc[:, 1] / zz**2
    JW = J @ R
    cov2 = JW @ covs @ np.swapaxes(JW, 1, 2)
    cov2 = 0.5 * (cov2 + np.swapaxes(cov2, 1, 2))
    # clamp eigenvalues from below
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    half_tr, det = 0.5 * (a + c), a * c - b * b
    disc = np.sqrt(np.maximum(half_tr**2 - det, 0.0))
    lo, hi = half_tr - disc, half_tr + disc
    bad = lo < 1e-8
    if np.any(bad):
        w, vecs = np.linalg.eigh(cov2[bad])
        w = np.maximum(w, 1e-8)
        cov2[bad] = (vecs * w[:, None, :]) @ np.swapaxes(vecs, 1, 2)
        hi = np.where(bad, np.maximum(hi, 1e-8), hi)
    return np.stack([u, v], axis=1), cov2, z, front, hi


def project(g, cam: Camera):
    """Screen-space mean, 2D covariance and camera depth of one Gaussian.

    Returns ``None`` when the Gaussian sits behind the near plane.
    """
    mean2d, cov2d, z, front, _ = _project_batch(g.mean[None, :], g.covariance()[None], cam)
    if not front[0]:
        return None
    return mean2d[0], cov2d[0], float(z[0])


def _view_colors(gs: GaussianSet, cam: Camera, articulation) -> np.ndarray:
    if gs.sh1 is None:
        return gs.colors.copy()
    d = gs.means - cam.center
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)
    if articulation is not None:
        d = adjusted_view_direction(articulation, d)
    x, y, z = d[:, 0:1], d[:, 1:2], d[:, 2:3]
    k = gs.sh1.reshape(-1, 3, 3)  # (n, channel, coefficient)
    sh = SH_C1 * (-y * k[:, :, 0] + z * k[:, :, 1] - x * k[:, :, 2])
    return np.clip(gs.colors + sh, 0.0, 1.0)


def _as_blocks(sets) -> list[Block]:
    if isinstance(sets, ComponentSet):
        return list(sets.blocks)
    if isinstance(sets, Block):
        return [sets]
    if isinstance(sets, GaussianSet):
        return [Block(sets, sets.opacities.copy(), mobile=False)]
    out: list[Block] = []
    for s in sets:
        out += _as_blocks(s)
    return out


def render(sets: ComponentSet | Block | GaussianSet | Iterable, cam: Camera,
           background: Sequence[float] = (0.0, 0.0, 0.0)) -> RenderOutput:
    """Depth-sorted front-to-back alpha compositing of all blocks in ``sets``.

    A block's ``weights`` replace the Gaussian opacities, its ``mobile`` flag
    selects the segmentation channel, and its ``articulation`` (if any) is
    used to rotate view directions back for the degree-1 color term.
    """
    h, w = cam.height, cam.width
    bg = np.asarray(background, dtype=float).reshape(3)
    blocks = [b for b in _as_blocks(sets) if len(b.weights)]
    color = np.zeros((h, w, 3))
    depth_acc = np.zeros((h, w))
    seg = np.zeros((2, h, w))
    T = np.ones((h, w))
    if blocks:
        means = np.concatenate([b.gaussians.means for b in blocks])
        covs = np.concatenate([b.gaussians.covariances() for b in blocks])
        weights = np.concatenate([b.weights for b in blocks])
        cols = np.concatenate([_view_colors(b.gaussians, cam, b.articulation) for b in blocks])
        tags = np.concatenate([np.full(len(b.weights), int(b.mobile)) for b in blocks])
        ids = np.concatenate([b.gaussians.ids for b in blocks])
        mean2d, cov2d, z, front, lam_max = _project_batch(means, covs, cam)
        order = np.lexsort((tags, ids, z))
        order = order[front[order] & (weights[order] > 0)]
        det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
        inv_a = cov2d[:, 1, 1] / det
        inv_b = -cov2d[:, 0, 1] / det
        inv_c = cov2d[:, 0, 0] / det
        radius = 3.0 * np.sqrt(lam_max)
        for k in order:
            u, v = mean2d[k]
            r = radius[k]
            j0, j1 = max(int(math.ceil(u - r)), 0), min(int(math.floor(u + r)), w - 1)
            i0, i1 = max(int(math.ceil(v - r)), 0), min(int(math.floor(v + r)), h - 1)
            if j0 > j1 or i0 > i1:
                continue
            dx = np.arange(j0, j1 + 1) - u
            dy = np.arange(i0, i1 + 1)[:, None] - v
            q = inv_a[k] * dx * dx + 2.0 * inv_b[k] * dx * dy + inv_c[k] * dy * dy
            Tp = T[i0:i1 + 1, j0:j1 + 1]
            alpha = np.minimum(weights[k] * np.exp(-0.5 * q), ALPHA_MAX)
            alpha = np.where(Tp >= T_MIN, alpha, 0.0)
            contrib = alpha * Tp
            color[i0:i1 + 1, j0:j1 + 1] += contrib[:, :, None] * cols[k]
            depth_acc[i0:i1 + 1, j0:j1 + 1] += contrib * z[k]
            seg[tags[k], i0:i1 + 1, j0:j1 + 1] += contrib
            Tp *= 1.0 - alpha
    alpha_map = 1.0 - T
    color += T[:, :, None] * bg
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = np.where(alpha_map > DEPTH_MIN_ALPHA, depth_acc / alpha_map, np.inf)
    labels = np.argmax(np.stack([T, seg[0], seg[1]]), axis=0).astype(np.uint8)
    return RenderOutput(color=color, depth=depth, segmentation=labels, alpha=alpha_map)


def state_blocks(set0: GaussianSet, M0: MobilityField, set1: GaussianSet, M1: MobilityField,
                 articulation, t: float, binarize: bool = False) -> ComponentSet:
    """Static union of both states plus the state-0 mobile component moved by ``t`` times the articulation."""
    if binarize:
        M0 = MobilityField.from_mobility((M0.m > 0.5).astype(float))
        M1 = MobilityField.from_mobility((M1.m > 0.5).astype(float))
    motion = articulation.scaled(t)
    moving = Block(set0.transformed(motion), set0.opacities * M0.m, mobile=True, articulation=motion)
    return static_component(set0, M0) + static_component(set1, M1) + ComponentSet((moving,))


def render_state(result, t: float, cam: Camera, background=(0.0, 0.0, 0.0), binarize: bool = False) -> RenderOutput:
    """Render the estimated model at interpolated articulation state ``t``."""
    if not -0.1 - 1e-12 <= t <= 1.1 + 1e-12:
        raise ValueError("t must lie in [-0.1, 1.1]")
    blocks = state_blocks(result.set0, result.M0, result.set1, result.M1, result.articulation, t, binarize)
    return render(blocks, cam, background)


def labelled_blocks(gs: GaussianSet, labels: np.ndarray) -> ComponentSet:
    """Tag Gaussians of one set as static or mobile using 0/1 labels."""
    labels = np.asarray(labels).reshape(-1)
    out = []
    for flag in (False, True):
        idx = np.flatnonzero(labels == int(flag))
        if len(idx):
            sub = gs.subset(idx)
            out.append(Block(sub, sub.opacities.copy(), mobile=flag))
    return ComponentSet(tuple(out))


# -- image files ----------------------------------------------------------------

DEPTH_MAGIC = b"DPTH"


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_color_png(path: str | Path, img: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def write_segmentation_png(path: str | Path, labels: np.ndarray) -> None:
    from PIL import Image

    im = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P")
    pal = np.zeros((256, 3), dtype=np.uint8)
    pal[: len(SEG_PALETTE)] = SEG_PALETTE
    im.putpalette(pal.reshape(-1).tolist())
    im.save(path, format="PNG")


def write_depth(path: str | Path, depth: np.ndarray) -> None:
    """Depth grid: ``b"DPTH"``, uint32 width, uint32 height, float32 row-major (little-endian)."""
    d = np.asarray(depth, dtype="<f4")
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC + struct.pack("<II", w, h))
        fh.write(d.tobytes(order="C"))


def read_depth(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != DEPTH_MAGIC:
        raise ValueError(f"{path}: not a depth grid")
    w, h = struct.unpack("<II", raw[4:12])
    data = np.frombuffer(raw[12:], dtype="<f4")
    if data.size != w * h:
        raise ValueError(f"{path}: expected {w * h} values, found {data.size}")
    return data.reshape(h, w).astype(float)
