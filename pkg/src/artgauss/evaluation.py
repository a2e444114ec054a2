"""Articulation errors, success criteria, part Chamfer, image metrics and trial sweeps."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .chamfer import NNIndex
from .core import Articulation, GaussianSet, Prismatic, Revolute, rodrigues
from .mobility import MobilityField, binarize
from .optim import ConvergenceCriterion, decode_articulation, optimize, random_init
from .losses import CrossMobileObjective, MobileOnlyObjective

UNIT_TOL = 1e-6
THRESHOLDS = {"err_a": 5.0, "err_p": 0.05, "err_r": 10.0, "err_t": 0.05}


def _unit(v, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(3)
    if abs(np.linalg.norm(v) - 1.0) > UNIT_TOL:
        raise ValueError(f"{name} must be a unit vector")
    return v


def _angle_between(a: np.ndarray, b: np.ndarray) -> float:
    # atan2 form stays accurate for nearly parallel vectors
    return math.degrees(math.atan2(np.linalg.norm(np.cross(a, b)), float(a @ b)))


def axis_error(a_est, a_gt) -> float:
    """Angle in degrees between two axes, ignoring their sign."""
    a, b = _unit(a_est, "a_est"), _unit(a_gt, "a_gt")
    return min(_angle_between(a, b), _angle_between(-a, b))


def pivot_error(line_est, line_gt) -> float:
    """Distance between two infinite lines given as ``(axis, point)``."""
    a1, p1 = _unit(line_est[0], "axis"), np.asarray(line_est[1], dtype=float)
    a2, p2 = _unit(line_gt[0], "axis"), np.asarray(line_gt[1], dtype=float)
    n = np.cross(a1, a2)
    nn = np.linalg.norm(n)
    w = p2 - p1
    if nn < 1e-9:
        return float(np.linalg.norm(w - (w @ a1) * a1))
    return float(abs(w @ n) / nn)


def rotation_error(est, gt) -> float:
    """Geodesic angle (degrees) between rotations given as ``(axis, angle)``."""
    R1 = rodrigues(_unit(est[0], "axis"), float(est[1]))
    R2 = rodrigues(_unit(gt[0], "axis"), float(gt[1]))
    c = (np.trace(R1 @ R2.T) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def translation_error(est, gt) -> float:
    """``|d_est a_est - d_gt a_gt|`` for translations given as ``(axis, distance)``."""
    a1, a2 = _unit(est[0], "axis"), _unit(gt[0], "axis")
    return float(np.linalg.norm(float(est[1]) * a1 - float(gt[1]) * a2))


@dataclass(frozen=True)
class ArticulationMetrics:
    kind: str
    err_a: float
    err_p: float | None = None
    err_r: float | None = None
    err_t: float | None = None

    def __post_init__(self):
        vals = [self.err_a, self.err_p, self.err_r, self.err_t]
        if any(v is not None and not (math.isfinite(v) and v >= 0) for v in vals):
            raise ValueError("metrics must be finite and nonnegative")
        rev = self.kind == "revolute"
        if rev and (self.err_p is None or self.err_r is None or self.err_t is not None):
            raise ValueError("revolute metrics need err_p and err_r only")
        if not rev and (self.err_t is None or self.err_p is not None or self.err_r is not None):
            raise ValueError("prismatic metrics need err_t only")

    @property
    def success(self) -> bool:
        return is_success(self)

    def as_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if v is not None}
        d["success"] = self.success
        return d


def articulation_metrics(est: Articulation, gt: Articulation) -> ArticulationMetrics:
    if type(est) is not type(gt):
        raise ValueError("estimated and true articulations differ in type")
    ea = axis_error(est.axis, gt.axis)
    if isinstance(gt, Revolute):
        return ArticulationMetrics("revolute", ea, err_p=pivot_error((est.axis, est.pivot), (gt.axis, gt.pivot)),
                                   err_r=rotation_error((est.axis, est.angle), (gt.axis, gt.angle)))
    return ArticulationMetrics("prismatic", ea, err_t=translation_error((est.axis, est.distance), (gt.axis, gt.distance)))


def is_success(m: ArticulationMetrics, factor: float = 1.0) -> bool:
    """All applicable errors strictly below their thresholds (scaled by ``factor``)."""
    ok = m.err_a < THRESHOLDS["err_a"] * factor
    if m.kind == "revolute":
        return bool(ok and m.err_p < THRESHOLDS["err_p"] * factor and m.err_r < THRESHOLDS["err_r"] * factor)
    return bool(ok and m.err_t < THRESHOLDS["err_t"] * factor)


# -- part Chamfer ----------------------------------------------------------------

def sample_from_gaussians(gs: GaussianSet, index: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points drawn from the mixture of the indexed Gaussians, weighted by opacity."""
    p = gs.opacities[index] / gs.opacities[index].sum()
    pick = index[rng.choice(len(index), size=n, p=p)]
    z = rng.standard_normal((n, 3)) * gs.scales[pick]
    R = gs.rotation_matrices()[pick]
    return gs.means[pick] + np.einsum("nij,nj->ni", R, z)


def chamfer_points(x: np.ndarray, y: np.ndarray) -> float:
    """Unweighted symmetric Chamfer: mean squared NN distance both ways."""
    return float(NNIndex(y).query(x)[1].mean() + NNIndex(x).query(y)[1].mean())


@dataclass(frozen=True)
class PartChamfer:
    cd_s: float | None
    cd_m: float | None
    cd_w: float


def part_chamfer(gs: GaussianSet, est_labels: np.ndarray, true_labels: np.ndarray,
                 n: int = 10000, seed: int = 0) -> PartChamfer:
    """Per-category Chamfer between the estimated and true part splits of ``gs``.

    Each side uses its own fixed seed, so the whole-object value ``cd_w``
    does not depend on the labels.
    """
    est_labels, true_labels = np.asarray(est_labels), np.asarray(true_labels)
    ss = np.random.SeedSequence(seed).spawn(3)

    def side(labels, which, s):
        idx = np.flatnonzero(labels == which) if which is not None else np.arange(len(gs))
        if len(idx) == 0:
            return None
        return sample_from_gaussians(gs, idx, n, np.random.default_rng(s))

    out = []
    for k, which in enumerate((0, 1, None)):
        a = side(est_labels, which, ss[k].spawn(2)[0])
        b = side(true_labels, which, ss[k].spawn(2)[1])
        out.append(None if a is None or b is None else chamfer_points(a, b))
    return PartChamfer(out[0], out[1], out[2])


def result_part_chamfer(result, truth, state: int = 0, n: int = 10000, seed: int = 0) -> PartChamfer:
    gs = result.set0 if state == 0 else result.set1
    M = result.M0 if state == 0 else result.M1
    labels = truth.labels0 if state == 0 else truth.labels1
    return part_chamfer(gs, binarize(M), labels, n, seed)


# -- image metrics ---------------------------------------------------------------

@dataclass(frozen=True)
class ImageMetrics:
    psnr: float
    depth_mae: float
    iou_s: float
    iou_m: float
    iou_bg: float

    @property
    def miou(self) -> float:
        return (self.iou_s + self.iou_m + self.iou_bg) / 3.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, dtype=float) - np.asarray(b, dtype=float)) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two boolean masks; two empty masks count as a perfect match."""
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


def image_metrics(pred, truth) -> ImageMetrics:
    if pred.color.shape != truth.color.shape:
        raise ValueError("prediction and truth resolutions differ")
    both = np.isfinite(pred.depth) & np.isfinite(truth.depth)
    mae = float(np.mean(np.abs(pred.depth[both] - truth.depth[both]))) if both.any() else math.nan
    seg_p, seg_t = pred.segmentation, truth.segmentation
    return ImageMetrics(
        psnr=psnr(pred.color, truth.color),
        depth_mae=mae,
        iou_s=iou(seg_p == 1, seg_t == 1),
        iou_m=iou(seg_p == 2, seg_t == 2),
        iou_bg=iou(seg_p == 0, seg_t == 0),
    )


# -- trial sweep -----------------------------------------------------------------

@dataclass
class SweepTrial:
    formulation: str
    index: int
    seed: int
    final_loss: float
    rank: int
    success: bool
    articulation: list[float] = field(default_factory=list)


@dataclass
class SweepReport:
    trials: list[SweepTrial]

    def of(self, formulation: str) -> list[SweepTrial]:
        return [t for t in self.trials if t.formulation == formulation]

    def success_rate(self, formulation: str) -> float:
        ts = self.of(formulation)
        return sum(t.success for t in ts) / len(ts) if ts else math.nan

    def mean_ranks(self, formulation: str) -> tuple[float, float]:
        """Mean loss rank of successful and of failed trials."""
        ts = self.of(formulation)
        ok = [t.rank for t in ts if t.success]
        bad = [t.rank for t in ts if not t.success]
        return (float(np.mean(ok)) if ok else math.nan, float(np.mean(bad)) if bad else math.nan)


def _ranks(losses: Sequence[float]) -> list[int]:
    order = np.argsort(np.asarray(losses, dtype=float), kind="stable")
    ranks = np.empty(len(order), dtype=int)
    ranks[order] = np.arange(1, len(order) + 1)
    return ranks.tolist()


def trial_sweep(set0: GaussianSet, set1: GaussianSet, M0: MobilityField, M1: MobilityField,
                truth: Articulation, n: int, seed: int = 0, criterion: ConvergenceCriterion = ConvergenceCriterion(),
                lrs: dict | None = None, relax: float = 2.0) -> SweepReport:
    """``n`` random-init trials per formulation, optimizing the articulation only."""
    if n < 1:
        raise ValueError("n must be at least 1")
    kind = "revolute" if isinstance(truth, Revolute) else "prismatic"
    pts = np.concatenate([set0.means, set1.means])
    bounds = (pts.min(axis=0), pts.max(axis=0))
    lrs = lrs or {"axis": 1e-2, "pivot": 1e-2, "angle": 1e-2, "distance": 1e-2}
    mo = MobileOnlyObjective(set0, set1, M0.logits, M1.logits)
    cmo = CrossMobileObjective(set0, set1)

    def cm(p):
        v, g, _, _ = cmo(p, M0.logits, M1.logits)
        return v, g

    trials: list[SweepTrial] = []
    for f_idx, (name, loss) in enumerate((("mobile-only", mo), ("cross-mobile", cm))):
        seeds = [int(c.generate_state(1, np.uint32)[0]) for c in np.random.SeedSequence([seed, f_idx]).spawn(n)]
        rows = []
        for i, s in enumerate(seeds):
            init = random_init(kind, bounds, np.random.default_rng(s))
            res = optimize(loss, init, criterion, lrs)
            try:
                art = decode_articulation(res.params)
                ok = is_success(articulation_metrics(art, truth), relax)
            except (ArithmeticError, ValueError):
                ok = False
            rows.append((i, s, res.loss if math.isfinite(res.loss) else math.inf, ok, res.params.values.tolist()))
        ranks = _ranks([r[2] for r in rows])
        trials += [SweepTrial(name, i, s, loss_v, rk, ok, vals) for (i, s, loss_v, ok, vals), rk in zip(rows, ranks)]
    return SweepReport(trials)


# -- tables ------------------------------------------------------------------------

TABLE_COLUMNS = (
    ("err_a", "err_a(1e-2 DEG)", 1e2),
    ("err_p", "err_p(1e-3)", 1e3),
    ("err_r", "err_r(1e-2 DEG)", 1e2),
    ("err_t", "err_t(1e-3)", 1e3),
    ("cd_s", "CD_s(1e-3)", 1e3),
    ("cd_m", "CD_m(1e-3)", 1e3),
    ("cd_w", "CD_w(1e-3)", 1e3),
)


def format_table(rows: Sequence[tuple[str, dict]]) -> str:
    """Aligned text table; each row is ``(name, metrics dict)``. Missing entries print as ``-``."""
    header = ["run"] + [h for _, h, _ in TABLE_COLUMNS] + ["success"]
    body = []
    for name, m in rows:
        cells = [name]
        for key, _, scale in TABLE_COLUMNS:
            v = m.get(key)
            cells.append("-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v * scale:.2f}")
        cells.append("yes" if m.get("success") else "no")
        body.append(cells)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in [header] + body]
    return "\n".join(lines) + "\n"
