"""Command-line front end: ``xpbi run | verify | metrics | study``."""
from __future__ import annotations

import csv
import json
import os
import sys
import time
from dataclasses import replace
from datetime import datetime
from pathlib import Path

import click
import numpy as np

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
RESIDUAL_FLAG = 1e-2


def _threads_default():
    raw = os.environ.get("XPBI_THREADS")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise click.UsageError(f"XPBI_THREADS must be an integer, got {raw!r}")


def _set_threads(threads):
    import numba
    if threads is None:
        return numba.get_num_threads()
    limit = numba.config.NUMBA_NUM_THREADS
    if not 1 <= threads <= limit:
        raise click.UsageError(f"--threads must be between 1 and {limit}")
    numba.set_num_threads(threads)
    return threads


def _load_scene(scene, dt=None, iters=None, backend=None, seed=None):
    from .scene_io import SceneError, parse_scene, resolve_scene
    try:
        path = resolve_scene(scene)
        spec = parse_scene(path)
        kw = {}
        if dt is not None:
            kw["dt"] = dt
        if iters is not None:
            kw["iterations"] = iters
        if backend is not None:
            kw["backend"] = backend
        if kw:
            spec.solver = replace(spec.solver, **kw)
        if seed is not None:
            spec.seed = seed
    except (SceneError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_USAGE)
    return path, spec


def _run_dir(out: Path, name: str) -> Path:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    base = out / f"{name}-{stamp}"
    d = base
    k = 1
    while d.exists():
        d = Path(f"{base}-{k}")
        k += 1
    d.mkdir(parents=True)
    return d


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Meshless XPBD simulation of elastoplastic continua."""


@main.command()
@click.option("--scene", required=True, help="Scene JSON file or bundled scene name.")
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), default=Path("runs"),
              show_default=True, help="Parent directory for the run directory.")
@click.option("--dt", type=float, help="Override the substep size (s).")
@click.option("--iters", type=int, help="Override the solver iteration count.")
@click.option("--backend", type=click.Choice(["gs", "jacobi"]), help="Constraint sweep backend.")
@click.option("--threads", type=int, default=_threads_default, help="Worker threads (default: XPBI_THREADS).")
@click.option("--seed", type=int, help="Override the sampling seed.")
@click.option("--frames", type=int, help="Number of frames to write (default: duration x frame rate).")
@click.option("--csv-frames", is_flag=True, help="Write frames as CSV instead of binary.")
def run(scene, out, dt, iters, backend, threads, seed, frames, csv_frames):
    """Simulate a scene and write frames, metrics and diagnostics."""
    from .scene_io import (Frame, compute_metrics, instantiate, serialize_scene, write_frame,
                           write_metrics_csv, METRIC_COLUMNS)
    from .solver import PHASES, SimulationError, step

    path, spec = _load_scene(scene, dt, iters, backend, seed)
    n_threads = _set_threads(threads)
    if frames is not None and frames < 1:
        raise click.UsageError("--frames must be at least 1")
    n_frames = frames if frames is not None else spec.n_frames
    try:
        rundir = _run_dir(out, spec.name)
    except OSError as exc:
        click.echo(f"error: cannot create run directory under {out}: {exc.strerror}", err=True)
        sys.exit(EXIT_FAILURE)
    manifest = {
        "scene": str(path), "output": str(rundir),
        "overrides": {"dt": dt, "iterations": iters, "backend": backend, "threads": n_threads,
                      "seed": seed, "frames": frames, "csv_frames": csv_frames},
        "effective": {"dt": spec.solver.dt, "iterations": spec.solver.iterations,
                      "backend": spec.solver.backend, "seed": spec.seed, "frames": n_frames},
        "files": [], "status": "running",
    }

    def save_manifest():
        (rundir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    serialize_scene(spec, rundir / "scene.json")
    manifest["files"].append("scene.json")
    save_manifest()

    state, world, config = instantiate(spec)
    sub = spec.substeps_per_frame
    track_cfg = replace(config, track_residual=True)
    metrics_rows = []
    diag_rows = []
    ext = "csv" if csv_frames else "bin"
    click.echo(f"{spec.name}: {state.n} particles, {n_frames} frames x {sub} substeps, dt={config.dt}")
    t_start = time.perf_counter()
    try:
        for f in range(1, n_frames + 1):
            residual = float("nan")
            for s in range(sub):
                # the first and last substeps are tracked; divergence usually shows at once
                tracked = s == 0 or s == sub - 1
                state, diag = step(state, track_cfg if tracked else config, world, inplace=True)
                if diag.residuals:
                    rel = diag.relative_residuals[-1]
                    residual = rel if np.isnan(residual) else max(residual, rel)
                    diag_rows.extend(diag.csv_rows())
                else:
                    diag_rows.append([diag.step, diag.iterations, ""]
                                     + [diag.timings_us[k] for k in PHASES])
            name = f"frame_{f:05d}.{ext}"
            write_frame(Frame.from_state(state), rundir / name, "csv" if csv_frames else "binary")
            manifest["files"].append(name)
            m = compute_metrics(state, world.radius)
            metrics_rows.append([state.step, state.time, m.nn_mean, m.nn_std, m.max_density, residual,
                                 int(residual > RESIDUAL_FLAG)])
    except SimulationError as exc:
        snap = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in exc.snapshot.items()}
        (rundir / "failure.json").write_text(json.dumps({"error": str(exc), "snapshot": snap}, indent=2))
        manifest["status"] = "failed"
        manifest["files"].append("failure.json")
        save_manifest()
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_FAILURE)
    except OSError as exc:
        manifest["status"] = "failed"
        save_manifest()
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_FAILURE)
    finally:
        if metrics_rows:
            with open(rundir / "metrics.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(list(METRIC_COLUMNS) + ["residual_flag"])
                w.writerows(metrics_rows)
            with open(rundir / "diagnostics.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["step", "iteration", "residual"] + [f"{k}_us" for k in PHASES])
                w.writerows(diag_rows)
    manifest["files"] += ["metrics.csv", "diagnostics.csv"]
    manifest["status"] = "completed"
    manifest["wall_seconds"] = time.perf_counter() - t_start
    save_manifest()
    flagged = sum(r[-1] for r in metrics_rows)
    click.echo(f"wrote {n_frames} frames to {rundir}"
               + (f" ({flagged} frames with residual above {RESIDUAL_FLAG})" if flagged else ""))


@main.command()
@click.option("--threads", type=int, default=_threads_default, help="Worker threads (default: XPBI_THREADS).")
@click.option("--trials", type=int, default=10_000, show_default=True, help="Return-map trials per model.")
@click.option("--scene-steps", type=int, default=5, show_default=True,
              help="Steps per bundled scene in the invariant suite.")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), help="Write the report as CSV.")
def verify(threads, trials, scene_steps, out):
    """Run every oracle and the bundled-scene invariant suite."""
    from .verification import run_verification
    _set_threads(threads)
    reports = run_verification(trials=trials, scene_steps=scene_steps, echo=click.echo)
    if out is not None:
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "max_error", "tolerance", "passed", "samples"])
            w.writerows(r.csv_row() for r in reports)
    failed = [r for r in reports if not r.passed]
    click.echo(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    sys.exit(EXIT_FAILURE if failed else EXIT_OK)


@main.command()
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True, file_okay=False, path_type=Path),
              help="Run directory produced by `xpbi run`.")
def metrics(run_dir):
    """Recompute metrics from the saved frames of a run."""
    from .scene_io import (SceneError, compute_metrics, instantiate, parse_scene, read_frame,
                           write_metrics_csv)
    try:
        spec = parse_scene(run_dir / "scene.json")
    except SceneError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_USAGE)
    state, world, _ = instantiate(spec)
    files = sorted(list(run_dir.glob("frame_*.bin")) + list(run_dir.glob("frame_*.csv")))
    if not files:
        click.echo(f"error: no frames in {run_dir}", err=True)
        sys.exit(EXIT_USAGE)
    rows = []
    for f in files:
        fr = read_frame(f)
        if fr.count != state.n:
            click.echo(f"error: {f} holds {fr.count} particles, scene has {state.n}", err=True)
            sys.exit(EXIT_FAILURE)
        state.x = fr.x
        m = compute_metrics(state, world.radius)
        rows.append([fr.step, fr.time, m.nn_mean, m.nn_std, m.max_density, ""])
    path = write_metrics_csv(rows, run_dir / "metrics_recomputed.csv")
    click.echo(f"wrote {path}")


@main.command()
@click.option("--scene", required=True, help="Scene JSON file or bundled scene name.")
@click.option("--kind", type=click.Choice(["iterations", "dt"]), default="iterations", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), required=True, help="CSV output path.")
@click.option("--iters", type=int, default=50, show_default=True, help="Iterations per step (iterations study).")
@click.option("--steps", type=int, default=1, show_default=True, help="Steps to run (iterations study).")
@click.option("--backend", type=click.Choice(["gs", "jacobi", "both"]), default="both", show_default=True)
@click.option("--dts", default="1e-4,1e-3", show_default=True, help="Comma-separated dt list (dt study).")
@click.option("--duration", type=float, help="Simulated time for the dt study (default: scene duration).")
@click.option("--threads", type=int, default=_threads_default)
def study(scene, kind, out, iters, steps, backend, dts, duration, threads):
    """Residual-per-iteration or timestep-consistency sweeps as CSV."""
    from .oracles import bbox_diagonal, trajectory_rms
    from .scene_io import instantiate
    from .solver import step
    _set_threads(threads)
    _, spec = _load_scene(scene)
    rows = []
    if kind == "iterations":
        header = ["backend", "step", "iteration", "residual", "relative_residual"]
        for b in (["gs", "jacobi"] if backend == "both" else [backend]):
            state, world, config = instantiate(spec)
            cfg = replace(config, iterations=iters, backend=b, track_residual=True)
            for s in range(steps):
                state, diag = step(state, cfg, world, inplace=True)
                for i, (r, rr) in enumerate(zip(diag.residuals, diag.relative_residuals)):
                    rows.append([b, s + 1, i, r, rr])
    else:
        try:
            dt_list = sorted(float(d) for d in dts.split(","))
        except ValueError:
            raise click.UsageError(f"--dts must be a comma-separated list of numbers, got {dts!r}")
        T = duration if duration is not None else spec.duration
        header = ["mode", "dt", "steps", "rms_vs_smallest_dt"]
        for implicit in (True, False):
            finals = []
            for d in dt_list:
                state, world, config = instantiate(spec)
                cfg = replace(config, dt=d, implicit_plasticity=implicit)
                n = max(1, round(T / d))
                for _ in range(n):
                    state, _ = step(state, cfg, world, inplace=True)
                finals.append((d, n, state.x.copy()))
            diag = bbox_diagonal(instantiate(spec)[0].x)
            ref = finals[0][2]
            for d, n, x in finals:
                rows.append(["implicit" if implicit else "semi-implicit", d, n, trajectory_rms(x, ref, diag)])
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    click.echo(f"wrote {len(rows)} rows to {out}")


if __name__ == "__main__":
    main()
