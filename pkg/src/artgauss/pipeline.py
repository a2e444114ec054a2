"""Geometric stages: mobility estimation, articulation estimation, mobility correction."""
from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .core import Articulation, GaussianSet, identity_articulation
from .losses import CrossMobileObjective, CrossStaticObjective, MobileOnlyObjective
from .mobility import MobilityField, binarize
from .optim import (
    ConvergenceCriterion,
    OptimizeResult,
    ParamVector,
    articulation_params,
    decode_articulation,
    extend,
    make_layout,
    optimize,
    random_init,
)

log = logging.getLogger(__name__)

PHASES = ("mobile-only", "cross-mobile")
THREADS_ENV = "ARTGAUSS_THREADS"


@dataclass(frozen=True)
class PipelineConfig:
    kind: str = "revolute"
    lambda_geom: float = 0.01
    k_mobile: int = 3
    k_cross: int = 3
    seed: int = 0
    lr_articulation: float = 1e-2
    lr_logits: float = 5e-2
    window: int = 50
    rel_tol: float = 1e-4
    refine_rel_tol: float = 1e-5
    max_iters: int = 5000
    logit_clip: float = 8.0
    prune: float = 1e-2
    mobile_threshold: float = 0.5
    min_mobile: int = 10
    min_mobile_fraction: float = 0.02
    skip_phases: tuple[str, ...] = ()
    lambda_correct: float = 0.0

    def __post_init__(self):
        if self.kind not in ("revolute", "prismatic"):
            raise ValueError(f"unknown articulation kind {self.kind!r}")
        if not self.lambda_geom > 0:
            raise ValueError("lambda_geom must be positive")
        if self.k_mobile < 1 or self.k_cross < 1:
            raise ValueError("trial counts must be at least 1")
        bad = set(self.skip_phases) - set(PHASES)
        if bad:
            raise ValueError(f"unknown phases {sorted(bad)}")
        if not 0 <= self.min_mobile_fraction < 1:
            raise ValueError("min_mobile_fraction must lie in [0, 1)")
        if len(set(self.skip_phases)) == len(PHASES):
            raise ValueError("cannot skip every articulation phase")
        object.__setattr__(self, "skip_phases", tuple(self.skip_phases))

    @property
    def criterion(self) -> ConvergenceCriterion:
        return ConvergenceCriterion(self.window, self.rel_tol, self.max_iters)

    @property
    def refine_criterion(self) -> ConvergenceCriterion:
        """Criterion of the final joint run; tighter than the restart trials."""
        return ConvergenceCriterion(self.window, self.refine_rel_tol, self.max_iters)

    @property
    def lrs(self) -> dict[str, float]:
        a = self.lr_articulation
        return {"axis": a, "pivot": a, "angle": a, "distance": a, "logits": self.lr_logits}


@dataclass
class TrialRecord:
    phase: str
    index: int
    seed: int | None
    init: list[float]
    final_loss: float
    final: list[float]
    iterations: int
    converged: bool
    error: str | None = None


@dataclass
class StageReport:
    stage: str
    initial_loss: float
    final_loss: float
    iterations: int
    wall_time: float
    converged: bool = False
    error: str | None = None
    trials: list[TrialRecord] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    best_trial: int | None = None


@dataclass
class PipelineResult:
    articulation: Articulation
    M0: MobilityField
    M1: MobilityField
    set0: GaussianSet
    set1: GaussianSet
    reports: list[StageReport]
    failed: bool = False
    failure: str | None = None
    seed: int = 0
    T_mobile: Articulation | None = None
    T_cross: Articulation | None = None

    def report(self, stage: str) -> StageReport | None:
        return next((r for r in self.reports if r.stage == stage), None)


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _map_ordered(fn: Callable, items: Sequence):
    n = thread_count()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _clip_logits(limit: float) -> Callable[[ParamVector], None]:
    def project(p: ParamVector) -> None:
        for name, sl in p.layout.items():
            if name.startswith("logits"):
                np.clip(p.values[sl], -limit, limit, out=p.values[sl])
    return project


def _report(stage: str, res: OptimizeResult, t0: float) -> StageReport:
    return StageReport(stage, res.initial_loss, res.loss, res.iterations, time.perf_counter() - t0,
                       res.converged, res.error)


def _trial_seeds(master: int) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
    a, b = np.random.SeedSequence(master).spawn(2)
    return a, b


def _derive(ss: np.random.SeedSequence, n: int) -> list[int]:
    return [int(c.generate_state(1, np.uint32)[0]) for c in ss.spawn(n)]


def scene_bounds(set0: GaussianSet, set1: GaussianSet) -> tuple[np.ndarray, np.ndarray]:
    pts = np.concatenate([set0.means, set1.means])
    return pts.min(axis=0), pts.max(axis=0)


# -- stage 2(a) ------------------------------------------------------------------

def stage2a(set0: GaussianSet, set1: GaussianSet, lambda_geom: float,
            config: PipelineConfig = PipelineConfig()) -> tuple[MobilityField, MobilityField, StageReport]:
    """Mobility from cross-static consistency plus the mean-mobility regularizer."""
    if not lambda_geom > 0:
        raise ValueError("lambda_geom must be positive")
    t0 = time.perf_counter()
    obj = CrossStaticObjective(set0, set1, lambda_geom)
    n0, n1 = len(set0), len(set1)
    init = ParamVector(np.zeros(n0 + n1), make_layout(None, (n0, n1)))

    def loss(p: ParamVector):
        v, g0, g1 = obj(p["logits0"], p["logits1"])
        return v, np.concatenate([g0, g1])

    res = optimize(loss, init, config.criterion, config.lrs, _clip_logits(config.logit_clip))
    M0, M1 = MobilityField(res.params["logits0"]), MobilityField(res.params["logits1"])
    return M0, M1, _report("2a", res, t0)


# -- stage 3(a) ------------------------------------------------------------------

def _record(phase: str, index: int, seed, init: ParamVector, res: OptimizeResult) -> TrialRecord:
    return TrialRecord(phase, index, seed, init.values.tolist(), res.loss,
                       res.params.articulation_part().values.tolist() if res.params.kind else res.params.values.tolist(),
                       res.iterations, res.converged, res.error)


def _best(results: Sequence[OptimizeResult]) -> int | None:
    """Lowest final loss among finite trials; ties go to the lowest index."""
    best, best_loss = None, math.inf
    for i, r in enumerate(results):
        if math.isfinite(r.loss) and r.loss < best_loss:
            best, best_loss = i, r.loss
    return best


def stage3a(set0: GaussianSet, set1: GaussianSet, M0: MobilityField, M1: MobilityField, kind: str,
            k_mobile: int, k_cross: int, rng_seed: int,
            config: PipelineConfig = PipelineConfig()):
    """Three-phase articulation estimation with randomized restarts.

    Returns ``(T, M0', M1', report, T_mobile, T_cross)``; ``T`` is ``None``
    when every trial of a phase failed.
    """
    t0 = time.perf_counter()
    report = StageReport("3a", math.nan, math.nan, 0, 0.0)
    bounds = scene_bounds(set0, set1)
    s1, s2 = _trial_seeds(rng_seed)
    crit, lrs = config.criterion, config.lrs
    T_m = None

    if "mobile-only" not in config.skip_phases:
        mo = MobileOnlyObjective(set0, set1, M0.logits, M1.logits, config.mobile_threshold,
                                 config.min_mobile, config.prune)
        seeds = _derive(s1, k_mobile)

        def run_mobile(i):
            init = random_init(kind, bounds, np.random.default_rng(seeds[i]))
            return init, optimize(mo, init, crit, lrs)

        outs = _map_ordered(run_mobile, range(k_mobile))
        report.trials += [_record("mobile-only", i, seeds[i], ini, r) for i, (ini, r) in enumerate(outs)]
        b = _best([r for _, r in outs])
        if b is None:
            report.error = "all mobile-only trials failed"
            report.wall_time = time.perf_counter() - t0
            return None, M0, M1, report, None, None
        T_m = outs[b][1].params
        report.notes.append(f"mobile-only best trial {b}")

    cm = CrossMobileObjective(set0, set1)
    if "cross-mobile" in config.skip_phases:
        T = decode_articulation(T_m)
        report.best_trial = _best_index(report, "mobile-only")
        report.final_loss = report.trials[report.best_trial].final_loss
        report.initial_loss = report.trials[0].final_loss if report.trials else math.nan
        report.wall_time = time.perf_counter() - t0
        return T, M0, M1, report, T, None

    def t_only(p: ParamVector):
        v, g, _, _ = cm(p, M0.logits, M1.logits, prune=config.prune)
        return v, g

    seeds = _derive(s2, k_cross)

    def run_cross(i):
        if i < k_cross:
            init = random_init(kind, bounds, np.random.default_rng(seeds[i]))
        else:
            init = T_m.copy()
        return init, optimize(t_only, init, crit, lrs)

    n_trials = k_cross + (1 if T_m is not None else 0)
    outs = _map_ordered(run_cross, range(n_trials))
    report.trials += [
        _record("cross-mobile", i, seeds[i] if i < k_cross else None, ini, r) for i, (ini, r) in enumerate(outs)
    ]
    b = _best([r for _, r in outs])
    if b is None:
        report.error = "all cross-mobile trials failed"
        report.wall_time = time.perf_counter() - t0
        return None, M0, M1, report, (decode_articulation(T_m) if T_m is not None else None), None
    T_cm = outs[b][1].params
    report.notes.append(f"cross-mobile best trial {b}")

    # phase 3: joint refinement of T and mobility
    joint_init = extend(T_cm, M0.logits, M1.logits)
    na = len(T_cm.values)

    def joint(p: ParamVector):
        art = ParamVector(p.values[:na], T_cm.layout, T_cm.kind)
        v, g, g0, g1 = cm(art, p["logits0"], p["logits1"], prune=config.prune)
        return v, np.concatenate([g, g0, g1])

    res = optimize(joint, joint_init, config.refine_criterion, lrs, _clip_logits(config.logit_clip))
    report.trials.append(_record("joint", 0, None, joint_init, res))
    report.initial_loss = res.initial_loss
    report.final_loss = res.loss
    report.iterations = res.iterations
    report.converged = res.converged
    report.error = res.error
    report.wall_time = time.perf_counter() - t0
    art = ParamVector(res.params.values[:na], T_cm.layout, T_cm.kind)
    T = decode_articulation(art)
    M0n, M1n = MobilityField(res.params["logits0"]), MobilityField(res.params["logits1"])
    return T, M0n, M1n, report, (decode_articulation(T_m) if T_m is not None else None), decode_articulation(T_cm)


def _best_index(report: StageReport, phase: str) -> int:
    cands = [(t.final_loss, k) for k, t in enumerate(report.trials) if t.phase == phase and math.isfinite(t.final_loss)]
    return min(cands)[1]


# -- stage 3(c) ------------------------------------------------------------------

def stage3c(set0: GaussianSet, set1: GaussianSet, M0: MobilityField, M1: MobilityField, T: Articulation,
            config: PipelineConfig = PipelineConfig()) -> tuple[MobilityField, MobilityField, StageReport]:
    """Mobility correction under the cross-mobile loss with ``T`` frozen."""
    t0 = time.perf_counter()
    cm = CrossMobileObjective(set0, set1)
    art = articulation_params(T)
    n0, n1 = len(set0), len(set1)
    init = ParamVector(np.concatenate([M0.logits, M1.logits]), make_layout(None, (n0, n1)))

    lam, N = config.lambda_correct, n0 + n1

    def loss(p: ParamVector):
        v, _, g0, g1 = cm(art, p["logits0"], p["logits1"], want_T=False)
        g = np.concatenate([g0, g1])
        if lam > 0:
            m = 1.0 / (1.0 + np.exp(-p.values))
            v += lam * m.sum() / N
            g = g + lam * m * (1 - m) / N
        return v, g

    res = optimize(loss, init, config.criterion, config.lrs, _clip_logits(config.logit_clip))
    return MobilityField(res.params["logits0"]), MobilityField(res.params["logits1"]), _report("3c", res, t0)


# -- composition -------------------------------------------------------------------

def run(set0: GaussianSet, set1: GaussianSet, config: PipelineConfig = PipelineConfig()) -> PipelineResult:
    """Stage 2(a), then 3(a), then 3(c); deterministic in ``config.seed``."""
    if len(set0) == 0 or len(set1) == 0:
        raise ValueError("both state sets must be nonempty")
    reports: list[StageReport] = []
    M0, M1, r2a = stage2a(set0, set1, config.lambda_geom, config)
    reports.append(r2a)
    null = identity_articulation(config.kind)
    if r2a.error:
        return PipelineResult(null, M0, M1, set0, set1, reports, True, f"stage 2a: {r2a.error}", config.seed)

    n_mob = (int(binarize(M0, config.mobile_threshold).sum()), int(binarize(M1, config.mobile_threshold).sum()))
    # resampling outliers alone label about 1% mobile on motionless scenes
    floor = [max(config.min_mobile, config.min_mobile_fraction * n) for n in (len(set0), len(set1))]
    if n_mob[0] < floor[0] or n_mob[1] < floor[1]:
        note = (f"only {n_mob[0]} / {n_mob[1]} Gaussians labelled mobile after stage 2a; "
                "reporting zero motion")
        log.info(note)
        r = StageReport("3a", math.nan, math.nan, 0, 0.0, notes=[note])
        reports.append(r)
        return PipelineResult(null, M0, M1, set0, set1, reports, False, None, config.seed)

    T, M0, M1, r3a, T_m, T_cm = stage3a(set0, set1, M0, M1, config.kind, config.k_mobile, config.k_cross,
                                        config.seed, config)
    reports.append(r3a)
    if T is None:
        return PipelineResult(null, M0, M1, set0, set1, reports, True, f"stage 3a: {r3a.error}", config.seed, T_m, T_cm)
    M0, M1, r3c = stage3c(set0, set1, M0, M1, T, config)
    reports.append(r3c)
    failed = r3c.error is not None
    return PipelineResult(T, M0, M1, set0, set1, reports, failed, f"stage 3c: {r3c.error}" if failed else None,
                          config.seed, T_m, T_cm)
