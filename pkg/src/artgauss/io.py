"""File formats: Gaussian PLY, articulation/truth/camera JSON and manifests.

PLY files follow the common 3DGS export layout (binary little-endian,
pre-activation opacity and scale) with two optional extension properties,
``mobility`` (float32) and ``state`` (uint8). Decoding picks, for every field,
the float64 value that re-encodes to the stored float32 bits, so
``write(read(file))`` reproduces the file and ``read`` of that output
reproduces the set exactly. The one exception is opacity logits above
``LOGIT_MAX``: their activations round to within 1e-10 of 1 and re-encode
as ``LOGIT_MAX``.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import jsonschema
import numpy as np
from scipy.special import expit, logit

from .core import Articulation, GaussianSet, Prismatic, Revolute
from .render import Camera

SH_C0 = 0.28209479177387814
QUAT_TOL = 1e-6
# float64 logistic is invertible on the float32 grid only up to about 23.5
LOGIT_MIN, LOGIT_MAX = -88.0, 23.0

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
}


class FormatError(ValueError):
    """Malformed or unsupported input file."""


# -- PLY ------------------------------------------------------------------------

@dataclass
class PlyData:
    """A Gaussian set plus the optional per-vertex extension fields."""

    gaussians: GaussianSet
    mobility: np.ndarray | None = None
    has_state: bool = False


def _encode_opacity(o: np.ndarray) -> np.ndarray:
    return np.clip(logit(o), LOGIT_MIN, LOGIT_MAX)


def _encode_color(c: np.ndarray) -> np.ndarray:
    return (c - 0.5) / SH_C0


def _stable_decode(raw: np.ndarray, decode: Callable, encode: Callable, steps: int = 64) -> np.ndarray:
    """Decode float32 ``raw`` so that ``float32(encode(x)) == raw`` bitwise.

    ``encode`` must be increasing; mismatches from float64 rounding are removed
    by stepping ``x`` one ulp at a time toward the stored value.
    """
    raw = np.asarray(raw, dtype=np.float32)
    x = decode(raw.astype(np.float64))
    for _ in range(steps):
        enc = encode(x).astype(np.float32)
        bad = enc != raw
        if not bad.any():
            break
        direction = np.where(enc[bad] < raw[bad], np.inf, -np.inf)
        x[bad] = np.nextafter(x[bad], direction)
    return x


def _vertex_fields(n_rest: int, mobility: bool, state: bool) -> list[tuple[str, str]]:
    f = [(k, "<f4") for k in ("x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2")]
    f += [(f"f_rest_{i}", "<f4") for i in range(n_rest)]
    f += [("opacity", "<f4")] + [(f"scale_{i}", "<f4") for i in range(3)]
    f += [(f"rot_{i}", "<f4") for i in range(4)]
    if mobility:
        f.append(("mobility", "<f4"))
    if state:
        f.append(("state", "u1"))
    return f


def _ply_name(dtype: str) -> str:
    return {"<f4": "float", "u1": "uchar"}[dtype]


def encode_ply(gs: GaussianSet, mobility: np.ndarray | None = None, state: bool = True) -> bytes:
    """Serialize a set to binary little-endian PLY bytes."""
    n = len(gs)
    if mobility is not None:
        mobility = np.asarray(mobility, dtype=float).reshape(n)
        if np.any((mobility < 0) | (mobility > 1)):
            raise ValueError("mobility values must lie in [0, 1]")
    n_rest = 0 if gs.sh1 is None else 9
    fields = _vertex_fields(n_rest, mobility is not None, state)
    rec = np.zeros(n, dtype=fields)
    for i, k in enumerate("xyz"):
        rec[k] = gs.means[:, i]
    dc = _encode_color(gs.colors)
    for i in range(3):
        rec[f"f_dc_{i}"] = dc[:, i]
    for i in range(n_rest):
        rec[f"f_rest_{i}"] = gs.sh1[:, i]
    rec["opacity"] = _encode_opacity(gs.opacities)
    ls = np.log(gs.scales)
    for i in range(3):
        rec[f"scale_{i}"] = ls[:, i]
        rec[f"rot_{i}"] = gs.quats[:, i]
    rec["rot_3"] = gs.quats[:, 3]
    if mobility is not None:
        rec["mobility"] = mobility
    if state:
        rec["state"] = gs.states
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {_ply_name(t)} {k}" for k, t in fields]
    header.append("end_header")
    return ("\n".join(header) + "\n").encode("ascii") + rec.tobytes()


def write_ply(path: str | Path, gs: GaussianSet, mobility: np.ndarray | None = None, state: bool = True) -> None:
    Path(path).write_bytes(encode_ply(gs, mobility, state))


def _parse_header(data: bytes) -> tuple[list[tuple[str, int, list[tuple[str, str]]]], int]:
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError("not a PLY file")
    stop = data.index(b"\n", end) + 1
    lines = data[:stop].decode("ascii", errors="replace").splitlines()
    elements: list = []
    fmt = None
    for line in lines[1:-1]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1] if len(tok) > 1 else None
        elif tok[0] == "element":
            if len(tok) != 3:
                raise FormatError(f"bad element line {line!r}")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise FormatError("property before any element")
            if tok[1] == "list":
                raise FormatError("list properties are not supported")
            if tok[1] not in _PLY_TYPES or len(tok) != 3:
                raise FormatError(f"unsupported property {line!r}")
            elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt != "binary_little_endian":
        raise FormatError(f"unsupported PLY format {fmt!r}; expected binary_little_endian")
    return elements, stop


def decode_ply(data: bytes) -> PlyData:
    """Parse PLY bytes into a Gaussian set with activations applied."""
    elements, offset = _parse_header(data)
    if not elements or elements[0][0] != "vertex":
        raise FormatError("the first PLY element must be 'vertex'")
    _, n, props = elements[0]
    dtype = np.dtype(props)
    if len(data) < offset + n * dtype.itemsize:
        raise FormatError("PLY body is truncated")
    rec = np.frombuffer(data, dtype=dtype, count=n, offset=offset)
    names = set(dtype.names)
    required = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    missing = [k for k in required if k not in names]
    if missing:
        raise FormatError(f"PLY is missing properties {missing}")

    def col(k):
        return np.asarray(rec[k])

    means = np.stack([col(k).astype(np.float64) for k in "xyz"], axis=1)
    colors = np.stack([_stable_decode(col(f"f_dc_{i}"), lambda f: 0.5 + SH_C0 * f, _encode_color)
                       for i in range(3)], axis=1)
    opac = _stable_decode(col("opacity"), expit, _encode_opacity)
    scales = np.stack([_stable_decode(col(f"scale_{i}"), np.exp, np.log) for i in range(3)], axis=1)
    quats = np.stack([col(f"rot_{i}").astype(np.float64) for i in range(4)], axis=1)
    norms = np.linalg.norm(quats, axis=1)
    if np.any(norms == 0) or not np.all(np.isfinite(quats)):
        raise FormatError("PLY contains zero or non-finite quaternions")
    off = np.abs(norms - 1.0) > QUAT_TOL
    quats[off] /= norms[off, None]
    rest = sorted((k for k in names if k.startswith("f_rest_")), key=lambda k: int(k[7:]))
    sh1 = None
    if rest:
        if len(rest) % 3 or [int(k[7:]) for k in rest] != list(range(len(rest))):
            raise FormatError("f_rest properties must be f_rest_0..f_rest_{3K-1}")
        per = len(rest) // 3
        # channel-major coefficients; keep the three degree-1 terms per channel
        sh1 = np.stack([col(f"f_rest_{c * per + k}").astype(np.float64)
                        for c in range(3) for k in range(3)], axis=1) if per >= 3 else None
    states = col("state").astype(np.uint8) if "state" in names else None
    mobility = col("mobility").astype(np.float64) if "mobility" in names else None
    for arr in (means, colors, opac, scales):
        if not np.all(np.isfinite(arr)):
            raise FormatError("PLY contains non-finite values")
    opac = np.clip(opac, np.nextafter(0.0, 1.0), 1.0)
    scales = np.maximum(scales, np.finfo(float).tiny)
    try:
        gs = GaussianSet(means=means, quats=quats, scales=scales, opacities=opac,
                         colors=colors, sh1=sh1, states=states)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    return PlyData(gs, mobility, states is not None)


def read_ply(path: str | Path) -> PlyData:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return decode_ply(data)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# -- JSON -----------------------------------------------------------------------

def load_schema(name: str) -> dict:
    text = resources.files("artgauss").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def validate(doc: Any, name: str) -> None:
    """Raise :class:`FormatError` when ``doc`` violates schema ``name``."""
    try:
        jsonschema.validate(doc, load_schema(name))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise FormatError(f"{name}: {exc.message} at {where}") from exc


def jsonable(x: Any) -> Any:
    """Convert numpy values to JSON types; non-finite floats become ``None``."""
    if isinstance(x, dict):
        return {str(k): jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def dumps(doc: Any) -> str:
    return json.dumps(jsonable(doc), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path: str | Path, doc: Any, schema: str | None = None) -> None:
    doc = jsonable(doc)
    if schema is not None:
        validate(doc, schema)
    Path(path).write_text(dumps(doc))


def read_json(path: str | Path, schema: str | None = None) -> Any:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if schema is not None:
        try:
            validate(doc, schema)
        except FormatError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    return doc


def articulation_to_json(art: Articulation) -> dict:
    if isinstance(art, Revolute):
        return {"type": "revolute", "axis": art.axis.tolist(), "pivot": art.pivot.tolist(),
                "angle_rad": float(art.angle)}
    return {"type": "prismatic", "axis": art.axis.tolist(), "distance": float(art.distance)}


def articulation_from_json(doc: dict) -> Articulation:
    validate(doc, "articulation")
    try:
        if doc["type"] == "revolute":
            return Revolute(doc["axis"], doc["pivot"], doc["angle_rad"])
        return Prismatic(doc["axis"], doc["distance"])
    except ValueError as exc:
        raise FormatError(f"articulation: {exc}") from exc


def camera_to_json(cam: Camera) -> dict:
    return {"world_to_cam": cam.world_to_cam.reshape(-1).tolist(), "fx": cam.fx, "fy": cam.fy,
            "cx": cam.cx, "cy": cam.cy, "width": int(cam.width), "height": int(cam.height)}


def camera_from_json(doc: dict) -> Camera:
    try:
        return Camera(np.asarray(doc["world_to_cam"], dtype=float).reshape(4, 4), float(doc["fx"]),
                      float(doc["fy"]), float(doc["cx"]), float(doc["cy"]), int(doc["width"]),
                      int(doc["height"]))
    except ValueError as exc:
        raise FormatError(f"camera: {exc}") from exc


def cameras_to_json(cams0, cams1) -> dict:
    return {"state0": [camera_to_json(c) for c in cams0], "state1": [camera_to_json(c) for c in cams1]}


def cameras_from_json(doc: dict) -> tuple[tuple[Camera, ...], tuple[Camera, ...]]:
    validate(doc, "cameras")
    return tuple(camera_from_json(c) for c in doc["state0"]), tuple(camera_from_json(c) for c in doc["state1"])


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
