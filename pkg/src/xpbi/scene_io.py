"""Scene files, frame output and particle-distribution metrics."""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .constitutive import MODEL_TAGS, MaterialModel
from .geometry import HalfSpace, shape_from_dict, shape_rows, shape_to_dict, sdf_union
from .kernels import KernelSpec, w_value
from .particles import ParticleSet, lattice_sample, poisson_disk_sample
from .solver import Collider, SolverConfig, World

SCENE_VERSION = 1
SAMPLERS = ("poisson", "lattice")
# Poisson min-distance as a fraction of r; gives about one particle per r^d,
# the same number density as a lattice at spacing r
POISSON_FACTOR = {2: 0.79, 3: 0.87}
_SOLVER_KEYS = {"dt", "iterations", "backend", "xsph_c", "gap_factor", "gravity",
                "implicit_plasticity", "position_correction", "residual_tol", "track_residual",
                "correction_cutoff"}


class SceneError(ValueError):
    """Invalid scene description; the message starts with the offending path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class GeometrySpec:
    shape: object
    material: str
    velocity: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    sampler: str = "poisson"
    fixed: Optional[object] = None


@dataclass
class SceneSpec:
    name: str
    dim: int
    particle_radius: float
    materials: Dict[str, MaterialModel]
    geometry: List[GeometrySpec]
    colliders: List[Collider]
    solver: SolverConfig
    duration: float
    frame_rate: float
    seed: int = 0
    version: int = SCENE_VERSION

    @property
    def substeps_per_frame(self) -> int:
        return max(1, math.ceil(1.0 / (self.frame_rate * self.solver.dt) - 1e-9))

    @property
    def n_frames(self) -> int:
        return max(1, round(self.duration * self.frame_rate))


# --------------------------------------------------------------------------
# parsing


def _req(d: dict, key: str, path: str):
    if not isinstance(d, dict):
        raise SceneError(path, "expected an object")
    if key not in d:
        raise SceneError(f"{path}.{key}" if path else key, "missing required field")
    return d[key]


def _num(value, path: str, positive: bool = False) -> float:
    if isinstance(value, str) and value.lower() in ("inf", "infinity"):
        value = math.inf
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SceneError(path, f"expected a number, got {value!r}")
    value = float(value)
    if positive and not value > 0:
        raise SceneError(path, f"must be positive, got {value}")
    return value


def _vec(value, path: str, dim: int) -> Tuple[float, float, float]:
    if not isinstance(value, (list, tuple)) or not 1 <= len(value) <= 3:
        raise SceneError(path, "expected a list of 1-3 numbers")
    out = [0.0, 0.0, 0.0]
    for i, c in enumerate(value):
        out[i] = _num(c, f"{path}[{i}]")
    return tuple(out)


def _shape(d, path: str):
    try:
        return shape_from_dict(d)
    except KeyError as exc:
        raise SceneError(f"{path}.{exc.args[0]}", "missing required field") from None
    except (TypeError, ValueError) as exc:
        raise SceneError(path, str(exc)) from None


def _material(d, path: str) -> MaterialModel:
    tag = _req(d, "model", path)
    params = _req(d, "params", path)
    if tag not in MODEL_TAGS:
        raise SceneError(f"{path}.model", f"unknown material tag {tag!r}; valid tags are "
                                          f"{', '.join(sorted(MODEL_TAGS))}")
    if not isinstance(params, list):
        raise SceneError(f"{path}.params", "expected a list of numbers")
    nums = [_num(p, f"{path}.params[{i}]") for i, p in enumerate(params)]
    try:
        return MaterialModel.from_tuple(tag, nums)
    except ValueError as exc:
        raise SceneError(f"{path}.params", str(exc)) from None


def scene_from_dict(data: dict) -> SceneSpec:
    """Validate a decoded scene document and fill defaults."""
    if not isinstance(data, dict):
        raise SceneError("<root>", "expected an object")
    version = int(_num(data.get("version", SCENE_VERSION), "version"))
    if version != SCENE_VERSION:
        raise SceneError("version", f"unsupported scene version {version}")
    dim = int(_num(data.get("dim", 3), "dim"))
    if dim not in (2, 3):
        raise SceneError("dim", f"must be 2 or 3, got {dim}")
    radius = _num(_req(data, "particle_radius", ""), "particle_radius", positive=True)

    mats = _req(data, "materials", "")
    if not isinstance(mats, dict) or not mats:
        raise SceneError("materials", "expected a non-empty object")
    materials = {name: _material(m, f"materials.{name}") for name, m in mats.items()}

    geo = _req(data, "geometry", "")
    if not isinstance(geo, list) or not geo:
        raise SceneError("geometry", "expected a non-empty list")
    geometry = []
    for i, g in enumerate(geo):
        p = f"geometry[{i}]"
        mat = _req(g, "material", p)
        if mat not in materials:
            raise SceneError(f"{p}.material", f"unknown material {mat!r}")
        sampler = g.get("sampler", "poisson")
        if sampler not in SAMPLERS:
            raise SceneError(f"{p}.sampler", f"expected one of {list(SAMPLERS)}, got {sampler!r}")
        shape = _shape(_req(g, "shape", p), f"{p}.shape")
        if isinstance(shape, HalfSpace):
            raise SceneError(f"{p}.shape", "half-spaces cannot be filled with particles")
        fixed = _shape(g["fixed"], f"{p}.fixed") if g.get("fixed") is not None else None
        geometry.append(GeometrySpec(shape, mat, _vec(g.get("velocity", [0, 0, 0]), f"{p}.velocity", dim),
                                     sampler, fixed))

    colliders = []
    for i, c in enumerate(data.get("colliders", [])):
        p = f"colliders[{i}]"
        shape = _shape(_req(c, "shape", p), f"{p}.shape")
        friction = _num(c.get("friction", 0.0), f"{p}.friction")
        if friction < 0:
            raise SceneError(f"{p}.friction", "must be non-negative")
        colliders.append(Collider(shape, friction, _vec(c.get("velocity", [0, 0, 0]), f"{p}.velocity", dim),
                                  bool(c.get("inside", False))))

    sol = data.get("solver", {})
    if not isinstance(sol, dict):
        raise SceneError("solver", "expected an object")
    unknown = set(sol) - _SOLVER_KEYS
    if unknown:
        raise SceneError(f"solver.{sorted(unknown)[0]}", "unknown solver option")
    kw = {}
    for key, value in sol.items():
        p = f"solver.{key}"
        if key == "gravity":
            kw[key] = _vec(value, p, dim)
        elif key == "backend":
            kw[key] = value
        elif key in ("implicit_plasticity", "position_correction", "track_residual"):
            if not isinstance(value, bool):
                raise SceneError(p, "expected true or false")
            kw[key] = value
        elif key == "residual_tol" and value is None:
            kw[key] = None
        else:
            kw[key] = _num(value, p, positive=key in ("dt", "iterations", "correction_cutoff"))
    if "iterations" in kw:
        if kw["iterations"] != int(kw["iterations"]):
            raise SceneError("solver.iterations", "expected an integer")
        kw["iterations"] = int(kw["iterations"])
    try:
        solver = SolverConfig(**kw)
    except ValueError as exc:
        raise SceneError("solver", str(exc)) from None

    duration = _num(_req(data, "duration", ""), "duration", positive=True)
    frame_rate = _num(data.get("frame_rate", 30.0), "frame_rate", positive=True)
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise SceneError("seed", "expected a non-negative integer")
    return SceneSpec(str(data.get("name", "scene")), dim, radius, materials, geometry, colliders,
                     solver, duration, frame_rate, seed, version)


def parse_scene(path) -> SceneSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SceneError(str(path), f"cannot read scene file ({exc.strerror})") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneError(str(path), f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return scene_from_dict(data)


def _jnum(x: float):
    return "inf" if math.isinf(x) else x


def scene_to_dict(spec: SceneSpec) -> dict:
    s = spec.solver
    return {
        "version": spec.version,
        "name": spec.name,
        "dim": spec.dim,
        "particle_radius": spec.particle_radius,
        "materials": {k: {"model": m.tag, "params": list(m.as_tuple())} for k, m in spec.materials.items()},
        "geometry": [
            {"shape": shape_to_dict(g.shape), "material": g.material, "velocity": list(g.velocity),
             "sampler": g.sampler, **({"fixed": shape_to_dict(g.fixed)} if g.fixed is not None else {})}
            for g in spec.geometry
        ],
        "colliders": [
            {"shape": shape_to_dict(c.shape), "friction": _jnum(c.friction), "velocity": list(c.velocity),
             "inside": c.inside}
            for c in spec.colliders
        ],
        "solver": {"dt": s.dt, "iterations": s.iterations, "backend": s.backend, "xsph_c": s.xsph_c,
                   "gap_factor": s.gap_factor, "gravity": list(s.gravity),
                   "implicit_plasticity": s.implicit_plasticity,
                   "position_correction": s.position_correction, "residual_tol": s.residual_tol,
                   "track_residual": s.track_residual, "correction_cutoff": s.correction_cutoff},
        "duration": spec.duration,
        "frame_rate": spec.frame_rate,
        "seed": spec.seed,
    }


def serialize_scene(spec: SceneSpec, path=None) -> str:
    text = json.dumps(scene_to_dict(spec), indent=2)
    if path is not None:
        Path(path).write_text(text + "\n")
    return text


def bundled_scenes() -> Dict[str, Path]:
    root = Path(__file__).parent / "scenes"
    return {p.stem: p for p in sorted(root.glob("*.json"))}


def resolve_scene(name_or_path) -> Path:
    """Accept a file path or the name of a bundled scene."""
    p = Path(name_or_path)
    if p.exists():
        return p
    scenes = bundled_scenes()
    if str(name_or_path) in scenes:
        return scenes[str(name_or_path)]
    raise SceneError(str(name_or_path), f"no such file or bundled scene; bundled: {', '.join(scenes)}")


# --------------------------------------------------------------------------
# scene instantiation


def instantiate(spec: SceneSpec) -> Tuple[ParticleSet, World, SolverConfig]:
    """Seed particles and build the runtime objects for a scene."""
    names = list(spec.materials)
    state = ParticleSet.empty(spec.dim)
    for i, g in enumerate(spec.geometry):
        seed = spec.seed + 7919 * i
        if g.sampler == "lattice":
            x = lattice_sample(g.shape, spec.particle_radius, spec.dim)
        else:
            x = poisson_disk_sample(g.shape, POISSON_FACTOR[spec.dim] * spec.particle_radius,
                                    seed=seed, dim=spec.dim)
        if x.shape[0] == 0:
            raise SceneError(f"geometry[{i}].shape", "no particles fit in this shape")
        model = spec.materials[g.material]
        # rest volume splits the sampled region evenly, so total mass is exact
        V0 = g.shape.volume(spec.dim) / x.shape[0]
        pinned = None
        if g.fixed is not None:
            rows = shape_rows(g.fixed)
            pinned = np.array([sdf_union(rows, p) <= 0.0 for p in x], bool)
        part = ParticleSet.create(x, V0, model.density * V0, v=g.velocity,
                                  material=names.index(g.material),
                                  hardening=model.initial_hardening(), pinned=pinned, dim=spec.dim)
        if pinned is not None:
            part.v[pinned] = 0.0
        state = state.concat(part)
    world = World([spec.materials[k] for k in names], spec.particle_radius, spec.dim, list(spec.colliders))
    return state, world, spec.solver


# --------------------------------------------------------------------------
# frames


FRAME_MAGIC = b"XPBF"
FRAME_VERSION = 1
F_POS, F_VEL, F_DETF, F_YIELD = 1, 2, 4, 8
_HEADER = struct.Struct("<4sIIQqd")


@dataclass
class Frame:
    step: int
    time: float
    x: np.ndarray
    v: Optional[np.ndarray] = None
    det_F: Optional[np.ndarray] = None
    yield_flags: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1, 3)
        n = self.x.shape[0]
        if self.v is not None:
            self.v = np.asarray(self.v, dtype=np.float64).reshape(n, 3)
        if self.det_F is not None:
            self.det_F = np.asarray(self.det_F, dtype=np.float64).reshape(n)
        if self.yield_flags is not None:
            self.yield_flags = np.asarray(self.yield_flags, dtype=np.float64).reshape(n)

    @property
    def count(self) -> int:
        return self.x.shape[0]

    @property
    def mask(self) -> int:
        return (F_POS | (F_VEL if self.v is not None else 0) | (F_DETF if self.det_F is not None else 0)
                | (F_YIELD if self.yield_flags is not None else 0))

    @classmethod
    def from_state(cls, state: ParticleSet, velocities: bool = True) -> "Frame":
        return cls(state.step, state.time, state.x.copy(), state.v.copy() if velocities else None,
                   np.linalg.det(state.F) if state.n else np.zeros(0))


def _columns(frame: Frame):
    cols = [("x", frame.x[:, 0]), ("y", frame.x[:, 1]), ("z", frame.x[:, 2])]
    if frame.v is not None:
        cols += [("vx", frame.v[:, 0]), ("vy", frame.v[:, 1]), ("vz", frame.v[:, 2])]
    if frame.det_F is not None:
        cols.append(("det_F", frame.det_F))
    if frame.yield_flags is not None:
        cols.append(("yield", frame.yield_flags))
    return cols


def write_frame(frame: Frame, path, fmt: str = "binary") -> Path:
    """Write one frame; ``fmt`` is ``binary`` (canonical, bit-exact) or ``csv``."""
    path = Path(path)
    try:
        if fmt == "binary":
            with open(path, "wb") as fh:
                fh.write(_HEADER.pack(FRAME_MAGIC, FRAME_VERSION, frame.mask, frame.count,
                                      int(frame.step), float(frame.time)))
                for _, arr in ((None, frame.x), (None, frame.v), (None, frame.det_F), (None, frame.yield_flags)):
                    if arr is not None:
                        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        elif fmt == "csv":
            cols = _columns(frame)
            with open(path, "w", newline="") as fh:
                fh.write(f"# step={int(frame.step)} time={float(frame.time)!r}\n")
                w = csv.writer(fh)
                w.writerow([c for c, _ in cols])
                for i in range(frame.count):
                    w.writerow([repr(float(a[i])) for _, a in cols])
        else:
            raise ValueError(f"unknown frame format {fmt!r}; expected 'binary' or 'csv'")
    except OSError as exc:
        raise OSError(f"{path}: cannot write frame ({exc.strerror})") from exc
    return path


def read_frame(path) -> Frame:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"{path}: cannot read frame ({exc.strerror})") from exc
    if raw[:4] == FRAME_MAGIC:
        magic, version, mask, n, stp, t = _HEADER.unpack_from(raw, 0)
        if version != FRAME_VERSION:
            raise ValueError(f"{path}: unsupported frame version {version}")
        off = _HEADER.size
        out = {}
        for bit, name, width in ((F_POS, "x", 3), (F_VEL, "v", 3), (F_DETF, "det_F", 1), (F_YIELD, "yield_flags", 1)):
            if mask & bit:
                cnt = n * width
                arr = np.frombuffer(raw, dtype="<f8", count=cnt, offset=off).astype(np.float64)
                out[name] = arr.reshape(n, 3) if width == 3 else arr
                off += 8 * cnt
        if off != len(raw):
            raise ValueError(f"{path}: frame size does not match its header")
        return Frame(stp, t, **out)
    text = raw.decode()
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# step="):
        raise ValueError(f"{path}: not a frame file")
    meta = dict(kv.split("=") for kv in lines[0][2:].split())
    header = lines[1].split(",")
    data = np.array([[float(c) for c in ln.split(",")] for ln in lines[2:] if ln], dtype=np.float64)
    data = data.reshape(-1, len(header))
    col = {h: data[:, i] for i, h in enumerate(header)}
    x = np.stack([col["x"], col["y"], col["z"]], axis=1)
    v = np.stack([col["vx"], col["vy"], col["vz"]], axis=1) if "vx" in col else None
    return Frame(int(meta["step"]), float(meta["time"]), x, v, col.get("det_F"), col.get("yield"))


# --------------------------------------------------------------------------
# metrics


METRIC_COLUMNS = ("step", "time", "nn_mean", "nn_std", "max_density", "residual_final")


@dataclass
class Metrics:
    count: int
    valid: bool
    nn_mean: float
    nn_std: float
    max_density: float
    density: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))


def nearest_neighbor_distances(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if x.shape[0] < 2:
        return np.zeros(0)
    d, _ = cKDTree(x).query(x, k=2)
    return d[:, 1]


def compute_metrics(state: ParticleSet, radius: float, table=None) -> Metrics:
    """Nearest-neighbour spacing statistics and SPH density (self term included).

    With fewer than two particles the spacing statistics are undefined;
    they are reported as 0 with ``valid=False``.
    """
    n = state.n
    kernel = KernelSpec(radius, state.dim)
    density = state.m * kernel_self(kernel)
    if table is None and n:
        from .particles import build_neighbor_table
        table = build_neighbor_table(state.x, kernel.k, state.dim)
    for p in range(n):
        nb = table.neighbors(p)
        if nb.shape[0]:
            dist = np.linalg.norm(state.x[nb] - state.x[p], axis=1)
            density[p] += float(np.sum(state.m[nb] * np.array([w_value(d, radius, kernel.normalization)
                                                               for d in dist])))
    if n < 2:
        return Metrics(n, False, 0.0, 0.0, float(density.max()) if n else 0.0, density)
    nn = nearest_neighbor_distances(state.x)
    return Metrics(n, True, float(nn.mean()), float(nn.std()), float(density.max()), density)


def kernel_self(kernel: KernelSpec) -> float:
    return w_value(0.0, kernel.r, kernel.normalization)


def write_metrics_csv(rows: Sequence[Sequence], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        w.writerows(rows)
    return path
