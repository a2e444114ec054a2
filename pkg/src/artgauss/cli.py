"""Command-line interface: ``artgauss {synth,fit,eval,render,sweep}``.

Scene directories hold ``state0.ply``, ``state1.ply``, ``manifest.json`` and
optionally ``truth.json`` and ``cameras.json``. Exit codes: 0 success,
1 usage or input error, 2 pipeline failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logit

from . import io
from .config import ConfigError, config_to_dict, load_config, with_overrides
from .core import GaussianSet
from .evaluation import (articulation_metrics, format_table, is_success, part_chamfer, trial_sweep)
from .mobility import MobilityField, binarize
from .pipeline import PHASES, THREADS_ENV, PipelineConfig, PipelineResult, run, stage2a
from .render import render_state, write_color_png, write_depth, write_segmentation_png
from .synth import (ARCHETYPES, ArchetypeSpec, Truth, default_cameras, denormalize_articulation, generate,
                    normalize)

log = logging.getLogger("artgauss")

EXIT_OK, EXIT_INPUT, EXIT_FAILURE = 0, 1, 2
ARCHETYPE_KIND = {"hinge": "revolute", "drawer": "prismatic", "flat-slider": "prismatic",
                  "two-end-pen": "prismatic"}
RESULT_FORMAT = "artgauss-result/1"
SCENE_FORMAT = "artgauss-scene/1"
MOBILITY_LOGIT_CLIP = 30.0


class InputError(Exception):
    """Bad flags or malformed input files (exit code 1)."""


# -- helpers ----------------------------------------------------------------------

def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {out}: {exc.strerror}") from exc
    return out


def _write_bytes(path: Path, data: bytes) -> None:
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc.strerror}") from exc


def _write_json(path: Path, doc, schema: str | None = None) -> None:
    doc = io.jsonable(doc)
    if schema is not None:
        io.validate(doc, schema)
    _write_bytes(path, io.dumps(doc).encode())


def _load_truth(path: Path) -> Truth:
    doc = io.read_json(path, "truth")
    art = io.articulation_from_json(doc["articulation"])
    return Truth(art, np.asarray(doc["labels0"], dtype=np.uint8), np.asarray(doc["labels1"], dtype=np.uint8))


def _truth_json(truth: Truth, center=None, scale=None) -> dict:
    doc = {"articulation": io.articulation_to_json(truth.articulation),
           "labels0": truth.labels0.tolist(), "labels1": truth.labels1.tolist()}
    if center is not None:
        doc["frame"] = {"center": list(center), "scale": scale}
    return doc


def _load_scene(scene: Path) -> tuple[GaussianSet, GaussianSet, dict, Truth | None]:
    if not scene.is_dir():
        raise InputError(f"scene directory {scene} does not exist")
    set0 = io.read_ply(scene / "state0.ply").gaussians
    set1 = io.read_ply(scene / "state1.ply").gaussians
    manifest = io.read_json(scene / "manifest.json", "manifest") if (scene / "manifest.json").exists() else {}
    truth = _load_truth(scene / "truth.json") if (scene / "truth.json").exists() else None
    if truth is not None and (len(truth.labels0) != len(set0) or len(truth.labels1) != len(set1)):
        raise InputError(f"{scene / 'truth.json'}: label counts do not match the state PLYs")
    return set0, set1, manifest, truth


def _resolve_kind(flag: str | None, cfg_kind: str | None, manifest: dict, truth: Truth | None) -> str:
    if flag:
        return flag
    if cfg_kind:
        return cfg_kind
    if manifest.get("kind") in ("revolute", "prismatic"):
        return manifest["kind"]
    if truth is not None:
        return truth.articulation.kind
    raise InputError("articulation type unknown: pass --kind or record it in the scene manifest")


def _mobility_logits(m: np.ndarray) -> np.ndarray:
    return np.clip(logit(np.asarray(m, dtype=float)), -MOBILITY_LOGIT_CLIP, MOBILITY_LOGIT_CLIP)


def _stage_json(r) -> dict:
    d = dataclasses.asdict(r)
    d.pop("wall_time")
    return d


def _load_result(result_dir: Path) -> tuple[dict, PipelineResult]:
    doc = io.read_json(result_dir / "result.json", "result")
    plys = [io.read_ply(result_dir / f"state{l}.ply") for l in (0, 1)]
    for l, p in enumerate(plys):
        if p.mobility is None:
            raise InputError(f"{result_dir / f'state{l}.ply'} has no mobility property")
    art = io.articulation_from_json(doc["articulation"])
    M = [MobilityField(_mobility_logits(p.mobility)) for p in plys]
    res = PipelineResult(art, M[0], M[1], plys[0].gaussians, plys[1].gaussians, [], doc["failed"],
                         doc.get("failure"), doc["seed"])
    return doc, res


# -- commands ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = ArchetypeSpec(kind=args.archetype, n_static=args.n_static, n_mobile=args.n_mobile, noise=args.noise,
                         magnitude=args.magnitude, seed=args.seed, n_cameras=args.n_cameras,
                         resolution=args.resolution)
    scene = generate(spec)
    out = _out_dir(args.out)
    files = []
    for l, gs in enumerate((scene.set0, scene.set1)):
        data = io.encode_ply(gs)
        _write_bytes(out / f"state{l}.ply", data)
        files.append({"name": f"state{l}.ply", "elements": len(gs), "sha256": io.sha256(data)})
    frame = (scene.center.tolist(), scene.scale)
    truth_doc = io.jsonable(_truth_json(scene.truth, *frame))
    cams_doc = io.jsonable(io.cameras_to_json(scene.truth.cameras0, scene.truth.cameras1))
    for name, doc, schema in (("truth.json", truth_doc, "truth"), ("cameras.json", cams_doc, "cameras")):
        io.validate(doc, schema)
        data = io.dumps(doc).encode()
        _write_bytes(out / name, data)
        files.append({"name": name, "sha256": io.sha256(data)})
    params = {k: v for k, v in dataclasses.asdict(spec).items() if k not in ("custom", "kind", "seed")}
    params["magnitude"] = spec.resolved_magnitude
    manifest = {"format": SCENE_FORMAT, "seed": spec.seed, "archetype": spec.kind,
                "kind": ARCHETYPE_KIND[spec.kind], "params": params,
                "frame": {"center": frame[0], "scale": frame[1]}, "files": files}
    _write_json(out / "manifest.json", manifest, "manifest")
    print(f"wrote scene {spec.kind} seed {spec.seed} to {out}")
    return EXIT_OK


def _fit_config(args, manifest: dict, truth: Truth | None) -> PipelineConfig:
    base = PipelineConfig()
    cfg_kind = None
    if args.config:
        base = load_config(args.config)
        cfg_kind = base.kind if _config_sets_kind(args.config) else None
    kind = _resolve_kind(args.kind, cfg_kind, manifest, truth)
    overrides = {"kind": kind}
    for flag, key in (("seed", "seed"), ("k_mobile", "k_mobile"), ("k_cross", "k_cross"),
                      ("lambda_geom", "lambda_geom"), ("max_iters", "max_iters")):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v
    if args.skip_phase:
        overrides["skip_phases"] = tuple(dict.fromkeys(tuple(base.skip_phases) + tuple(args.skip_phase)))
    return with_overrides(base, overrides)


def _config_sets_kind(path: str) -> bool:
    from .config import tomllib

    with open(path, "rb") as fh:
        return "kind" in tomllib.load(fh).get("pipeline", {})


def fit_scene(set0: GaussianSet, set1: GaussianSet, config: PipelineConfig) -> tuple[PipelineResult, dict]:
    """Run the pipeline in the normalized frame; return the result and its JSON document.

    The returned articulation is expressed in the input frame; per-trial
    parameter vectors stay in the normalized frame recorded under ``frame``.
    """
    scene = normalize(set0, set1)
    res = run(scene.set0, scene.set1, config)
    art = denormalize_articulation(res.articulation, scene.center, scene.scale)
    opt = [None if a is None else io.articulation_to_json(denormalize_articulation(a, scene.center, scene.scale))
           for a in (res.T_mobile, res.T_cross)]
    doc = {
        "format": RESULT_FORMAT,
        "seed": config.seed,
        "articulation": io.articulation_to_json(art),
        "mobile_only": opt[0],
        "cross_mobile": opt[1],
        "failed": bool(res.failed),
        "failure": res.failure,
        "config": config_to_dict(config),
        "frame": {"center": scene.center.tolist(), "scale": scene.scale},
        "stages": [_stage_json(r) for r in res.reports],
    }
    out = dataclasses.replace(res, articulation=art, set0=set0, set1=set1)
    return out, io.jsonable(doc)


def cmd_fit(args) -> int:
    scene_dir = Path(args.scene)
    set0, set1, manifest, truth = _load_scene(scene_dir)
    config = _fit_config(args, manifest, truth)
    res, doc = fit_scene(set0, set1, config)
    out = _out_dir(args.out)
    _write_json(out / "result.json", doc, "result")
    for l, (gs, M) in enumerate(((set0, res.M0), (set1, res.M1))):
        _write_bytes(out / f"state{l}.ply", io.encode_ply(gs, mobility=M.m))
    _write_json(out / "timing.json", {r.stage: r.wall_time for r in res.reports})
    if res.failed:
        print(f"pipeline failed: {res.failure}", file=sys.stderr)
        return EXIT_FAILURE
    if truth is not None:
        m = articulation_metrics(res.articulation, truth.articulation)
        ok = is_success(m)
        print(f"fit {'succeeded' if ok else 'did not meet the success thresholds'}: {m.as_dict()}")
        return EXIT_OK if ok else EXIT_FAILURE
    print(f"fit written to {out}")
    return EXIT_OK


def evaluate_result(doc: dict, res: PipelineResult, truth: Truth, n_samples: int, seed: int) -> dict:
    if len(truth.labels0) != len(res.set0) or len(truth.labels1) != len(res.set1):
        raise InputError("truth labels do not match the result PLYs")
    metrics: dict = {"seed": doc["seed"], "fit_failed": bool(doc["failed"])}
    try:
        am = articulation_metrics(res.articulation, truth.articulation)
        metrics["articulation"] = am.as_dict()
        success = is_success(am) and not doc["failed"]
    except ValueError as exc:
        metrics["articulation"] = {"error": str(exc)}
        success = False
    metrics["success"] = bool(success)
    for l, (gs, M, lab) in enumerate(((res.set0, res.M0, truth.labels0), (res.set1, res.M1, truth.labels1))):
        est = binarize(M)
        pc = part_chamfer(gs, est, lab, n_samples, seed)
        metrics[f"state{l}"] = {"label_accuracy": float(np.mean(est == lab)),
                                **dataclasses.asdict(pc)}
    return metrics


def cmd_eval(args) -> int:
    result_dir = Path(args.result)
    truth_path = Path(args.truth)
    if truth_path.is_dir():
        truth_path = truth_path / "truth.json"
    if not truth_path.exists():
        raise InputError(f"truth file {truth_path} not found")
    truth = _load_truth(truth_path)
    doc, res = _load_result(result_dir)
    metrics = evaluate_result(doc, res, truth, args.samples, args.seed)
    out = _out_dir(args.out or args.result)
    _write_json(out / "metrics.json", metrics)
    row = dict(metrics.get("articulation", {}))
    row.update({k: metrics["state0"][k] for k in ("cd_s", "cd_m", "cd_w")})
    row["success"] = metrics["success"]
    table = format_table([(args.name or result_dir.name, row)])
    _write_bytes(out / "table.txt", table.encode())
    print(table, end="")
    return EXIT_OK


def _t_values(spec: str | None) -> list[float]:
    if not spec:
        return [float(t) for t in np.linspace(-0.1, 1.1, 11)]
    try:
        ts = [float(x) for x in spec.split(",") if x.strip()]
    except ValueError as exc:
        raise InputError(f"bad --t list {spec!r}") from exc
    if not ts or any(not -0.1 <= t <= 1.1 for t in ts):
        raise InputError("t values must lie in [-0.1, 1.1]")
    return ts


def cmd_render(args) -> int:
    _, res = _load_result(Path(args.result))
    if args.cameras:
        cams = io.cameras_from_json(io.read_json(Path(args.cameras), "cameras"))[0]
    else:
        cams = default_cameras(args.n_cameras, args.resolution)
    if args.camera is not None:
        if not 0 <= args.camera < len(cams):
            raise InputError(f"camera index {args.camera} out of range (have {len(cams)})")
        cams = (cams[args.camera],)
        indices = [args.camera]
    else:
        indices = list(range(len(cams)))
    ts = _t_values(args.t)
    out = _out_dir(args.out)
    bg = tuple(args.background)
    for ci, cam in zip(indices, cams):
        for ti, t in enumerate(ts):
            img = render_state(res, t, cam, bg, binarize=args.binarize)
            stem = f"cam{ci:02d}_t{ti:02d}"
            try:
                write_color_png(out / f"{stem}_color.png", img.color)
                write_segmentation_png(out / f"{stem}_seg.png", img.segmentation)
                write_depth(out / f"{stem}_depth.dpth", img.depth)
            except OSError as exc:
                raise InputError(f"cannot write renders to {out}: {exc.strerror}") from exc
    _write_json(out / "renders.json", {"t": ts, "cameras": indices})
    print(f"rendered {len(cams)} camera(s) x {len(ts)} state(s) to {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    set0, set1, manifest, truth = _load_scene(Path(args.scene))
    if truth is None:
        raise InputError(f"sweep needs {Path(args.scene) / 'truth.json'}")
    scene = normalize(set0, set1, truth)
    if args.result:
        _, res = _load_result(Path(args.result))
        if len(res.set0) != len(set0) or len(res.set1) != len(set1):
            raise InputError("result PLYs do not match the scene")
        M0, M1 = res.M0, res.M1
    else:
        cfg = PipelineConfig(kind=truth.articulation.kind)
        M0, M1, r = stage2a(scene.set0, scene.set1, cfg.lambda_geom, cfg)
        if r.error:
            print(f"stage 2a failed: {r.error}", file=sys.stderr)
            return EXIT_FAILURE
    cfg = PipelineConfig(kind=truth.articulation.kind)
    report = trial_sweep(scene.set0, scene.set1, M0, M1, scene.truth.articulation, args.n, args.seed,
                         cfg.criterion, {k: v for k, v in cfg.lrs.items() if k != "logits"}, args.relax)
    out = _out_dir(args.out)
    summary = {}
    for f in PHASES:
        ok, bad = report.mean_ranks(f)
        summary[f] = {"success_rate": report.success_rate(f), "mean_rank_success": ok, "mean_rank_failure": bad}
    _write_json(out / "sweep.json", {"seed": args.seed, "n": args.n, "relax": args.relax, "summary": summary,
                                     "trials": [dataclasses.asdict(t) for t in report.trials]})
    path = out / "sweep.csv"
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["formulation", "index", "seed", "final_loss", "rank", "success"])
            for t in report.trials:
                w.writerow([t.formulation, t.index, t.seed, repr(float(t.final_loss)), t.rank, int(t.success)])
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc.strerror}") from exc
    for f, s in summary.items():
        print(f"{f}: success {s['success_rate']:.2f}, mean rank success {s['mean_rank_success']}, "
              f"failure {s['mean_rank_failure']}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Reports usage errors with the input-error exit code instead of argparse's 2."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(
        prog="artgauss",
        description="Two-state articulated Gaussian-splat part segmentation and joint estimation.",
        epilog=f"Environment: {THREADS_ENV}=N runs restart trials on N threads (default 1). "
               "Exit codes: 0 success, 1 usage/input error, 2 pipeline failure.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic two-state scene")
    s.add_argument("--archetype", choices=ARCHETYPES, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output scene directory")
    s.add_argument("--n-static", type=int, default=2000)
    s.add_argument("--n-mobile", type=int, default=800)
    s.add_argument("--noise", type=float, default=0.005, help="point-to-surface noise, normalized units")
    s.add_argument("--magnitude", type=float, default=None, help="angle (rad) or distance of the motion")
    s.add_argument("--n-cameras", type=int, default=8)
    s.add_argument("--resolution", type=int, default=64)
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("fit", help="estimate part mobility and the articulation of a scene")
    f.add_argument("scene", help="scene directory")
    f.add_argument("--out", required=True, help="output directory")
    f.add_argument("--config", help="TOML file with a [pipeline] table")
    f.add_argument("--kind", choices=("revolute", "prismatic"), help="articulation type (default: from manifest)")
    f.add_argument("--seed", type=int, help="master seed")
    f.add_argument("--skip-phase", action="append", choices=PHASES, help="ablate an articulation phase")
    f.add_argument("--k-mobile", type=int, help="mobile-only restart count")
    f.add_argument("--k-cross", type=int, help="cross-mobile restart count")
    f.add_argument("--lambda-geom", type=float, help="mobility regularizer weight")
    f.add_argument("--max-iters", type=int, help="iteration cap per optimization")
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="score a fit against ground truth")
    e.add_argument("result", help="fit output directory")
    e.add_argument("truth", help="scene directory or truth.json")
    e.add_argument("--out", help="report directory (default: the result directory)")
    e.add_argument("--name", help="row label in table.txt")
    e.add_argument("--samples", type=int, default=10000, help="points sampled per part for Chamfer")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="render interpolated states of a fit")
    r.add_argument("result", help="fit output directory")
    r.add_argument("--out", required=True)
    r.add_argument("--cameras", help="cameras.json (state-0 cameras are used)")
    r.add_argument("--camera", type=int, help="render only this camera index")
    r.add_argument("--n-cameras", type=int, default=8, help="default ring size without --cameras")
    r.add_argument("--resolution", type=int, default=64, help="default camera resolution without --cameras")
    r.add_argument("--t", help="comma-separated states in [-0.1, 1.1] (default: 11 evenly spaced)")
    r.add_argument("--binarize", action="store_true", help="threshold mobility at 0.5 before rendering")
    r.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    r.set_defaults(func=cmd_render)

    w = sub.add_parser("sweep", help="random-restart robustness sweep of both formulations")
    w.add_argument("scene", help="scene directory with truth.json")
    w.add_argument("--n", type=int, default=100, help="trials per formulation")
    w.add_argument("--out", required=True)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--relax", type=float, default=2.0, help="success threshold multiplier")
    w.add_argument("--result", help="fit directory whose mobility to reuse (default: run stage 2a)")
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, io.FormatError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
