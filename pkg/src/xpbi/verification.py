"""The full check suite behind ``xpbi verify``."""
from __future__ import annotations

from typing import Callable, List, Optional

import numpy as np

from .constitutive import MaterialModel
from .oracles import (YIELD_TOL, OracleReport, _yield_batch, fd_gradient_check, herschel_bulkley_limits,
                      linear_field_consistency, neighbor_check, return_map_properties)
from .scene_io import bundled_scenes, instantiate, parse_scene
from .solver import SimulationError, step

# representative parameterizations, one per model
ORACLE_MATERIALS = {
    "VM": MaterialModel.from_tuple("VM", (1, 2e4, 0.3, 76.9)),
    "DP": MaterialModel.from_tuple("DP", (1, 3.537e5, 0.3, 35, 0)),
    "NACC": MaterialModel.from_tuple("NACC", (2, 2e4, 0.35, -0.02, 0.5, 1, 2.36)),
    "SnowClamp": MaterialModel.from_tuple("SnowClamp", (400, 5e5, 0.2, 0.025, 0.0075, 10)),
    "HB": MaterialModel.from_tuple("HB", (100, 14754, 0.475, 50, 1, 10)),
}


def state_yield(state, world) -> float:
    """Largest normalized yield value over all plastic particles."""
    worst = -np.inf
    d = state.dim
    for m, model in enumerate(world.materials):
        if model.plastic is None:
            continue
        idx = np.flatnonzero(state.material == m)
        if idx.size == 0:
            continue
        prm = model.pack()
        F = np.ascontiguousarray(state.F[idx, :d, :d])
        for i, p in enumerate(idx):
            y = _yield_batch(prm, F[i:i + 1], float(state.hardening[p]))[0]
            worst = max(worst, y)
    return float(worst)


def scene_invariants(name: str, path, steps: int) -> List[OracleReport]:
    """Finite state, admissible stresses and bitwise repeatability for a few steps."""
    spec = parse_scene(path)
    finals = []
    worst_yield = -np.inf
    finite = True
    for _ in range(2):
        state, world, config = instantiate(spec)
        try:
            for _ in range(steps):
                state, _ = step(state, config, world, inplace=True)
                worst_yield = max(worst_yield, state_yield(state, world))
        except SimulationError:
            finite = False
        finals.append(state)
    a, b = finals
    same = (np.array_equal(a.x, b.x) and np.array_equal(a.v, b.v) and np.array_equal(a.F, b.F))
    yerr = max(worst_yield, 0.0) if np.isfinite(worst_yield) else 0.0
    return [
        OracleReport(f"{name} finite", 0.0 if finite else np.inf, 0.0, steps),
        OracleReport(f"{name} yield", yerr, YIELD_TOL, steps * a.n, {"max_yield": worst_yield}),
        OracleReport(f"{name} bitwise repeat", 0.0 if same else float(np.max(np.abs(a.x - b.x))), 0.0, steps),
    ]


def run_verification(trials: int = 10_000, scene_steps: int = 5,
                     echo: Optional[Callable[[str], None]] = None,
                     scenes: Optional[List[str]] = None) -> List[OracleReport]:
    echo = echo or (lambda s: None)
    reports: List[OracleReport] = []

    def add(items):
        for r in items if isinstance(items, list) else [items]:
            reports.append(r)
            echo(r.line())

    for dim in (3, 2):
        r = fd_gradient_check(dim=dim)
        r.name += f" {dim}d"
        add(r)
        r = linear_field_consistency(dim=dim)
        r.name += f" {dim}d"
        add(r)
    add(neighbor_check())
    for tag in ("VM", "DP", "NACC", "SnowClamp"):
        for dim in (3, 2):
            rs = return_map_properties(ORACLE_MATERIALS[tag], trials=trials, dim=dim)
            for r in rs:
                r.name += f" {dim}d"
            add(rs)
    add(herschel_bulkley_limits(ORACLE_MATERIALS["HB"]))

    found = bundled_scenes()
    for name in scenes if scenes is not None else found:
        add(scene_invariants(name, found[name], scene_steps))
    return reports
