"""Command line entry points: fit, simulate, eval, serve.

Exit codes: 0 success, 2 configuration or input-file errors (including
argparse usage), 3 solver did not reach an optimal status, 1 unexpected
failure.  Every run writes its resolved config next to its outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from cvfields.bench import BenchmarkConfig, run_benchmark, split_demos
from cvfields.clisvc.config import ConfigError, EvalJob, FitJob, ServeJob, SimulateJob
from cvfields.clisvc.model_io import ModelSchemaError, load_model, save_model
from cvfields.data import Demonstration, read_trajectory_csv, write_trajectory_csv
from cvfields.dynsys import calibrate_alpha, integrate_field, modulate, read_obstacle_stream
from cvfields.learner import ContractionSpec, FitOptions, LearnerError, fit


def _read_demos(paths) -> list[Demonstration]:
    return [read_trajectory_csv(p) for p in paths]


def _write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


def run_fit(job: FitJob) -> int:
    job.validate()
    demos = _read_demos(job.demos)
    opts = FitOptions(
        trajectory_degree=job.trajectory_degree,
        accuracy=job.accuracy,
        max_iters=job.max_iters,
        constraint_margin=job.margin,
        normalize=job.normalize,
    )
    spec = ContractionSpec(tau=job.tau)
    tic = time.perf_counter()
    try:
        model = fit(demos, job.degree, spec, opts)
    except LearnerError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        diag = exc.diagnostics
        if diag is not None:
            print(f"status={diag.status} iterations={diag.iterations} "
                  f"feasible_tau={diag.feasible_tau}", file=sys.stderr)
        return 3
    wall = time.perf_counter() - tic

    out = Path(job.out)
    save_model(out, model, extra={"training_time": wall, "demo_files": list(job.demos)})
    _write_json(out.with_suffix(".config.json"), job.resolved())
    diag = model.diagnostics
    audit = {
        "status": diag.status,
        "loss": model.loss,
        "normalized_loss": diag.normalized_loss,
        "sampled_residual": diag.sampled_residual,
        "margin": diag.margin,
        "certificates": [
            {"ok": c.ok, "failure": c.failure, "recon_error": c.recon_error,
             "min_gram_eig": c.min_gram_eig}
            for c in diag.certificate_checks
        ],
        "training_time": wall,
    }
    _write_json(out.with_suffix(".audit.json"), audit)
    certs_ok = all(c.ok for c in diag.certificate_checks)
    print(f"model written to {out} (loss={model.loss:.6g}, "
          f"time={wall:.2f}s, certificates {'ok' if certs_ok else 'FAILED'})")
    return 0 if certs_ok else 3


def _sim_starts(job: SimulateJob, demos: list[Demonstration], n: int) -> np.ndarray:
    starts = [np.asarray(s, dtype=float) for s in job.starts]
    for s in starts:
        if s.shape != (n,):
            raise ConfigError(f"start {s.tolist()} is not {n}-dimensional")
    if job.grid > 0:
        allpos = np.vstack([d.positions for d in demos])
        lo, hi = allpos.min(axis=0), allpos.max(axis=0)
        center, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * 1.25
        rng = np.random.default_rng(job.seed)
        starts.extend(center + (2.0 * rng.random((job.grid, n)) - 1.0) * half)
    elif demos and not starts:
        starts.extend(d.positions[0] for d in demos)
    return np.array(starts)


def run_simulate(job: SimulateJob) -> int:
    job.validate()
    try:
        model = load_model(job.model)
    except ModelSchemaError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    demos = _read_demos(job.demos)
    starts = _sim_starts(job, demos, model.dimension)
    horizon = job.horizon
    if horizon is None:
        horizon = demos[0].horizon if demos else 10.0

    field = model.field
    modulated = False
    if job.obstacles is not None:
        alpha = job.obstacle_alpha
        obstacles = read_obstacle_stream(job.obstacles, r=job.obstacle_r,
                                         alpha=1.0, rho=job.obstacle_rho)
        if alpha is None:
            if demos:
                path = np.vstack([d.positions for d in demos])
            else:
                # calibrate along unmodulated rollouts, not bare start points
                path = np.vstack([
                    integrate_field(field, x0, horizon, dt=job.dt).states
                    for x0 in starts
                ])
            alpha = calibrate_alpha(field, obstacles, path)
        obstacles.alpha = alpha
        field = modulate(field, obstacles)
        modulated = True

    out_dir = Path(job.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {"config": job.resolved(), "modulated": modulated, "runs": []}
    for k, x0 in enumerate(starts):
        sim = integrate_field(field, x0, horizon, dt=job.dt,
                              stop_threshold=job.stop_threshold)
        dest = out_dir / f"trajectory_{k:03d}.csv"
        write_trajectory_csv(dest, sim.to_demonstration())
        summary["runs"].append({
            "file": dest.name,
            "start": x0.tolist(),
            "final": sim.final_state.tolist(),
            "termination": sim.termination,
            "duration": sim.duration,
        })
    _write_json(out_dir / "summary.json", summary)
    print(f"{len(starts)} trajectories written to {out_dir}")
    return 0


def run_eval(job: EvalJob) -> int:
    job.validate()
    try:
        model = load_model(job.model)
    except ModelSchemaError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    demos = _read_demos(job.demos)
    if len(demos) > job.train_count:
        train, test = split_demos(demos, job.train_count)
    else:
        train, test = demos, []
    cfg = BenchmarkConfig(grid_points=job.grid_points, horizon_multiple=job.horizon_multiple,
                          goal_radius=job.goal_radius, seed=job.seed,
                          timing_runs=job.timing_runs)
    t_train = model.diagnostics.solve_time + model.diagnostics.assembly_time
    report = run_benchmark(model, train, test, config=cfg, training_time=t_train)
    _write_json(job.out, {"config": job.resolved(), **report.as_dict()})
    print(report.to_text())
    print(f"report written to {job.out}")
    return 0


def run_serve(job: ServeJob) -> int:
    job.validate()
    import uvicorn

    from cvfields.clisvc.service import create_app

    uvicorn.run(create_app(), host=job.host, port=job.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cvfields",
                                description="contracting polynomial vector fields")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a contracting field to demo CSVs")
    f.add_argument("--demos", nargs="+", required=True, metavar="CSV")
    f.add_argument("--out", default="model.json")
    f.add_argument("--degree", type=int, default=5)
    f.add_argument("--tau", type=float, default=1.0)
    f.add_argument("--metric", default="identity")
    f.add_argument("--accuracy", type=float, default=1e-5)
    f.add_argument("--max-iters", type=int, default=25_000)
    f.add_argument("--margin", type=float, default=1e-3)
    f.add_argument("--trajectory-degree", type=int, default=None)
    f.add_argument("--no-normalize", action="store_true")

    s = sub.add_parser("simulate", help="integrate a saved model")
    s.add_argument("--model", required=True)
    s.add_argument("--out-dir", default="sim_out")
    s.add_argument("--demos", nargs="*", default=[], metavar="CSV")
    s.add_argument("--start", action="append", default=[],
                   help="comma-separated state, repeatable")
    s.add_argument("--grid", type=int, default=0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--horizon", type=float, default=None)
    s.add_argument("--dt", type=float, default=None)
    s.add_argument("--stop-threshold", type=float, default=0.0)
    s.add_argument("--obstacles", default=None, metavar="NDJSON")
    s.add_argument("--obstacle-r", type=int, default=4)
    s.add_argument("--obstacle-alpha", type=float, default=None)
    s.add_argument("--obstacle-rho", type=float, default=1e-3)

    e = sub.add_parser("eval", help="benchmark a saved model against demos")
    e.add_argument("--model", required=True)
    e.add_argument("--demos", nargs="+", required=True, metavar="CSV")
    e.add_argument("--out", default="report.json")
    e.add_argument("--train-count", type=int, default=4)
    e.add_argument("--grid-points", type=int, default=16)
    e.add_argument("--horizon-multiple", type=float, default=30.0)
    e.add_argument("--goal-radius", type=float, default=1.0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--timing-runs", type=int, default=5)

    v = sub.add_parser("serve", help="run the HTTP/WebSocket service")
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--port", type=int, default=8321)
    return p


def _parse_start(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad --start value {text!r}: {exc}") from exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "fit":
            return run_fit(FitJob(
                demos=tuple(args.demos), out=args.out, degree=args.degree,
                tau=args.tau, metric=args.metric, accuracy=args.accuracy,
                max_iters=args.max_iters, margin=args.margin,
                trajectory_degree=args.trajectory_degree,
                normalize=not args.no_normalize,
            ))
        if args.command == "simulate":
            return run_simulate(SimulateJob(
                model=args.model, out_dir=args.out_dir, demos=tuple(args.demos),
                starts=tuple(_parse_start(s) for s in args.start),
                grid=args.grid, seed=args.seed, horizon=args.horizon, dt=args.dt,
                stop_threshold=args.stop_threshold, obstacles=args.obstacles,
                obstacle_r=args.obstacle_r, obstacle_alpha=args.obstacle_alpha,
                obstacle_rho=args.obstacle_rho,
            ))
        if args.command == "eval":
            return run_eval(EvalJob(
                model=args.model, demos=tuple(args.demos), out=args.out,
                train_count=args.train_count, grid_points=args.grid_points,
                horizon_multiple=args.horizon_multiple, goal_radius=args.goal_radius,
                seed=args.seed, timing_runs=args.timing_runs,
            ))
        if args.command == "serve":
            return run_serve(ServeJob(host=args.host, port=args.port))
        raise AssertionError(f"unhandled command {args.command}")
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
