"""Analytic shape primitives used for particle seeding and colliders.

Every shape packs into a fixed-width float row so compiled loops can
evaluate signed distances without Python objects. Distances are
positive outside the shape.
"""
from dataclasses import dataclass
from typing import Sequence, Union as TUnion

import numpy as np
from numba import njit

BOX, SPHERE, CYLINDER, HALF_SPACE = 0, 1, 2, 3
ROW = 10
_FAR = 1e30


def _pad3(v, fill=0.0) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).ravel()
    out = np.full(3, fill)
    out[: v.shape[0]] = v
    return out


@dataclass(frozen=True)
class Box:
    lo: Sequence[float]
    hi: Sequence[float]

    def row(self) -> np.ndarray:
        lo = _pad3(self.lo, -_FAR)
        hi = _pad3(self.hi, _FAR)
        r = np.zeros(ROW)
        r[0] = BOX
        r[1:4] = 0.5 * (lo + hi)
        r[4:7] = 0.5 * (hi - lo)
        return r

    def bounds(self, d: int):
        return np.asarray(self.lo, float)[:d], np.asarray(self.hi, float)[:d]

    def volume(self, d: int) -> float:
        lo, hi = self.bounds(d)
        return float(np.prod(np.maximum(hi - lo, 0.0)))


@dataclass(frozen=True)
class Sphere:
    center: Sequence[float]
    radius: float

    def row(self) -> np.ndarray:
        r = np.zeros(ROW)
        r[0] = SPHERE
        r[1:4] = _pad3(self.center)
        r[7] = self.radius
        return r

    def bounds(self, d: int):
        c = _pad3(self.center)[:d]
        return c - self.radius, c + self.radius

    def volume(self, d: int) -> float:
        return np.pi * self.radius**2 if d == 2 else 4.0 / 3.0 * np.pi * self.radius**3


@dataclass(frozen=True)
class Cylinder:
    center: Sequence[float]
    axis: Sequence[float]
    radius: float
    half_height: float

    def row(self) -> np.ndarray:
        a = _pad3(self.axis)
        r = np.zeros(ROW)
        r[0] = CYLINDER
        r[1:4] = _pad3(self.center)
        r[4:7] = a / np.linalg.norm(a)
        r[7] = self.radius
        r[8] = self.half_height
        return r

    def bounds(self, d: int):
        c = _pad3(self.center)
        a = _pad3(self.axis)
        a = a / np.linalg.norm(a)
        ext = np.abs(a) * self.half_height + self.radius * np.sqrt(np.clip(1.0 - a * a, 0.0, 1.0))
        return (c - ext)[:d], (c + ext)[:d]

    def volume(self, d: int) -> float:
        if d == 2:
            return _grid_volume([self.row()], *self.bounds(2))
        return np.pi * self.radius**2 * 2.0 * self.half_height


@dataclass(frozen=True)
class HalfSpace:
    """Solid region ``(x - point) . normal < 0``; only used as a collider."""

    point: Sequence[float]
    normal: Sequence[float]

    def row(self) -> np.ndarray:
        n = _pad3(self.normal)
        r = np.zeros(ROW)
        r[0] = HALF_SPACE
        r[1:4] = _pad3(self.point)
        r[4:7] = n / np.linalg.norm(n)
        return r


@dataclass(frozen=True)
class Union:
    parts: Sequence[TUnion[Box, Sphere, Cylinder]]

    def rows(self) -> np.ndarray:
        return np.array([p.row() for p in self.parts])

    def bounds(self, d: int):
        los, his = zip(*(p.bounds(d) for p in self.parts))
        return np.min(los, axis=0), np.max(his, axis=0)

    def volume(self, d: int) -> float:
        return _grid_volume(self.rows(), *self.bounds(d))


Shape = TUnion[Box, Sphere, Cylinder, Union]


def shape_rows(shape) -> np.ndarray:
    if isinstance(shape, Union):
        return shape.rows()
    return shape.row()[None, :]


@njit(cache=True)
def sdf_row(row, x):
    kind = int(row[0])
    d0 = x[0] - row[1]
    d1 = x[1] - row[2]
    d2 = x[2] - row[3]
    if kind == BOX:
        q0 = abs(d0) - row[4]
        q1 = abs(d1) - row[5]
        q2 = abs(d2) - row[6]
        m0 = max(q0, 0.0)
        m1 = max(q1, 0.0)
        m2 = max(q2, 0.0)
        return np.sqrt(m0 * m0 + m1 * m1 + m2 * m2) + min(max(q0, max(q1, q2)), 0.0)
    if kind == SPHERE:
        return np.sqrt(d0 * d0 + d1 * d1 + d2 * d2) - row[7]
    if kind == CYLINDER:
        h = d0 * row[4] + d1 * row[5] + d2 * row[6]
        r0 = d0 - h * row[4]
        r1 = d1 - h * row[5]
        r2 = d2 - h * row[6]
        qr = np.sqrt(r0 * r0 + r1 * r1 + r2 * r2) - row[7]
        qa = abs(h) - row[8]
        mr = max(qr, 0.0)
        ma = max(qa, 0.0)
        return np.sqrt(mr * mr + ma * ma) + min(max(qr, qa), 0.0)
    return d0 * row[4] + d1 * row[5] + d2 * row[6]


@njit(cache=True)
def sdf_union(rows, x):
    best = np.inf
    for i in range(rows.shape[0]):
        best = min(best, sdf_row(rows[i], x))
    return best


@njit(cache=True)
def _count_inside(rows, lo, hi, h, d):
    n0 = max(int(np.ceil((hi[0] - lo[0]) / h)), 1)
    n1 = max(int(np.ceil((hi[1] - lo[1]) / h)), 1)
    n2 = max(int(np.ceil((hi[2] - lo[2]) / h)), 1) if d == 3 else 1
    x = np.zeros(3)
    count = 0
    for i in range(n0):
        x[0] = lo[0] + (i + 0.5) * h
        for j in range(n1):
            x[1] = lo[1] + (j + 0.5) * h
            for k in range(n2):
                if d == 3:
                    x[2] = lo[2] + (k + 0.5) * h
                if sdf_union(rows, x) <= 0.0:
                    count += 1
    return count


def _grid_volume(rows, lo, hi, cells: int = 256) -> float:
    d = len(lo)
    lo3 = _pad3(lo)
    hi3 = _pad3(hi)
    h = float(np.max(hi3[:d] - lo3[:d])) / cells
    if h <= 0:
        return 0.0
    return _count_inside(np.asarray(rows, dtype=np.float64), lo3, hi3, h, d) * h**d


def shape_from_dict(spec: dict) -> Shape:
    """Build a shape from its scene-file description."""
    kind = spec["type"]
    if kind == "box":
        return Box(tuple(spec["min"]), tuple(spec["max"]))
    if kind == "sphere":
        return Sphere(tuple(spec["center"]), float(spec["radius"]))
    if kind == "cylinder":
        return Cylinder(tuple(spec["center"]), tuple(spec.get("axis", (0, 0, 1))),
                        float(spec["radius"]), float(spec["half_height"]))
    if kind == "half_space":
        return HalfSpace(tuple(spec["point"]), tuple(spec["normal"]))
    if kind == "union":
        return Union(tuple(shape_from_dict(p) for p in spec["parts"]))
    raise ValueError(f"unknown shape type {kind!r}")


def shape_to_dict(shape) -> dict:
    if isinstance(shape, Box):
        return {"type": "box", "min": list(shape.lo), "max": list(shape.hi)}
    if isinstance(shape, Sphere):
        return {"type": "sphere", "center": list(shape.center), "radius": shape.radius}
    if isinstance(shape, Cylinder):
        return {"type": "cylinder", "center": list(shape.center), "axis": list(shape.axis),
                "radius": shape.radius, "half_height": shape.half_height}
    if isinstance(shape, HalfSpace):
        return {"type": "half_space", "point": list(shape.point), "normal": list(shape.normal)}
    if isinstance(shape, Union):
        return {"type": "union", "parts": [shape_to_dict(p) for p in shape.parts]}
    raise TypeError(f"not a shape: {shape!r}")
