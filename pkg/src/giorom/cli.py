"""Command-line entry point: ``giorom <command> [flags]``.

Exit codes: 0 success, 2 usage error, 3 data or shape error, 4 numerical blow-up.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .datagen import Trajectory, generate_elasticlike, generate_fluidlike, read_trajectory, write_trajectory
from .dynamics import WINDOW, BlowUpError, rollout
from .operator import ModelConfig, with_grid
from .rom import RomBasis, fit_basis, solve_weights, upsample, volume_metrics
from .trainer import (
    FRACTION_RANGES, Simulator, TrainConfig, load_checkpoint, load_config, rollout_subset, train,
)

EXIT_USAGE, EXIT_DATA, EXIT_BLOWUP = 2, 3, 4
SUFFIX = ".gtrj"


class UsageError(Exception):
    pass


def data_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get("GIOROM_DATA_DIR", "data"))


def list_trajectories(root: Path) -> list[Path]:
    files = sorted(root.glob(f"*{SUFFIX}"))
    if not files:
        raise FileNotFoundError(f"no {SUFFIX} files under {root}")
    return files


def announce(command: str, config: dict, seed) -> None:
    print(f"giorom {command}")
    print("config: " + json.dumps(config, sort_keys=True, default=str))
    print(f"seed: {seed}")
    sys.stdout.flush()


def thread_limit(n: int | None):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def default_fraction(traj: Trajectory) -> float:
    return float(np.mean(FRACTION_RANGES.get(traj.material, (1.0, 1.0))))


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_simulate_data(args) -> None:
    root = data_root(args.out)
    config = {"out": str(root), "count": args.count, "particles": args.particles,
              "steps": args.steps, "material": args.material}
    announce("simulate-data", config, args.seed)
    root.mkdir(parents=True, exist_ok=True)
    for k in range(args.count):
        seed = args.seed + k
        if args.material == "elastic":
            traj = generate_elasticlike(args.particles, args.steps, seed=seed)
        else:
            traj = generate_fluidlike(args.particles, args.steps, seed=seed, material=args.material)
        path = root / f"traj_{seed:05d}{SUFFIX}"
        write_trajectory(path, traj)
        print(path)


def cmd_train(args) -> None:
    raw = load_config(args.config) if args.config else {}
    model_kw = dict(raw.get("model") or {})
    train_kw = dict(raw.get("train") or {})
    data_kw = dict(raw.get("data") or {})
    for key, val in (("grid", args.grid), ("modes", args.modes)):
        if val is not None:
            model_kw[key] = val
    for key, val in (("steps", args.steps), ("sigma", args.sigma), ("seed", args.seed)):
        if val is not None:
            train_kw[key] = val
    try:
        model_cfg = ModelConfig(**model_kw)
        train_cfg = TrainConfig(**train_kw)
    except TypeError as exc:
        raise UsageError(f"bad config key: {exc}") from exc
    root = data_root(args.data or data_kw.get("dir"))
    files = list_trajectories(root)
    if data_kw.get("count"):
        files = files[:int(data_kw["count"])]
    out = Path(args.out)
    log = Path(args.log) if args.log else out.with_suffix(".csv")
    announce("train", {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(),
                       "data": str(root), "trajectories": len(files), "out": str(out), "log": str(log)},
             train_cfg.seed)
    trajs = [read_trajectory(f) for f in files]
    with thread_limit(args.threads):
        res = train(trajs, model_cfg, train_cfg, log_path=log, checkpoint=out)
    print(f"trained {train_cfg.steps} steps in {res.seconds:.1f} s; radius {res.radius:.6g}; "
          f"final loss {res.losses[-1] if len(res.losses) else float('nan'):.6g}")


def _load_model(path, grid):
    model, stats, meta = load_checkpoint(path)
    if grid is not None and grid != model.cfg.grid:
        model = with_grid(model, grid)
    return model, stats, meta


def cmd_rollout(args) -> None:
    model, stats, meta = _load_model(args.checkpoint, args.grid)
    traj = read_trajectory(args.data)
    fraction = args.fraction if args.fraction is not None else default_fraction(traj)
    radius = args.radius if args.radius is not None else float(meta["radius"])
    seed = args.seed if args.seed is not None else 0
    available = traj.num_frames - 1 - WINDOW
    steps = available if args.steps is None else args.steps
    if not 0 <= steps:
        raise UsageError("--steps must be >= 0")
    announce("rollout", {"checkpoint": str(args.checkpoint), "data": str(args.data), "fraction": fraction,
                         "radius": radius, "steps": steps, "grid": model.cfg.grid, "out": str(args.out)}, seed)
    index = rollout_subset(traj, fraction, seed)
    x = traj.frames()[:, index]
    sim = Simulator(model, stats, radius, traj.bounds, traj.particle_type[index])
    with thread_limit(args.threads):
        pred = rollout(sim, x[:WINDOW + 1], steps, bounds=traj.bounds)
    frames = np.concatenate([x[:WINDOW + 1], pred])
    write_trajectory(args.out, Trajectory(frames, traj.particle_type[index], traj.bounds, traj.dt,
                                          traj.material, traj.seed))
    if args.truth_out:
        n = min(len(frames), traj.num_frames)
        write_trajectory(args.truth_out, Trajectory(x[:n], traj.particle_type[index], traj.bounds,
                                                    traj.dt, traj.material, traj.seed))
    print(f"wrote {len(frames)} frames of {len(index)} particles to {args.out}")


def cmd_upsample(args) -> None:
    announce("upsample", {"basis": str(args.basis), "reduced": str(args.reduced),
                          "reference": str(args.reference), "fit_data": args.fit_data,
                          "rank": args.rank, "out": str(args.out)}, args.seed)
    if args.fit_data:
        trajs = [read_trajectory(f) for f in list_trajectories(Path(args.fit_data))]
        basis = fit_basis(trajs, rank=args.rank, seed=args.seed)
        basis.save(args.basis)
        print(f"fitted rank-{args.rank} basis, train mse {basis.snapshot_stats['train_mse']:.3g}")
    else:
        basis = RomBasis.load(args.basis)
    reduced = read_trajectory(args.reduced)
    reference = read_trajectory(args.reference)
    if reduced.dim != reference.dim or reduced.dim != basis.dim:
        raise ValueError("reduced rollout, reference cloud and basis disagree on dimension")
    x_red = reduced.frames()
    points = reference.frames(0, 1)[0]
    values = basis.evaluate(points)
    full = np.empty((reduced.num_frames,) + points.shape)
    for t in range(reduced.num_frames):
        w = solve_weights(basis, x_red[t], x_red[0])
        full[t] = upsample(basis, w, points, basis_values=values)
    write_trajectory(args.out, Trajectory(full, reference.particle_type, reference.bounds, reduced.dt,
                                          reference.material, reference.seed))
    print(f"wrote {len(full)} frames of {len(points)} particles to {args.out}")


def bench_rows(model, stats, traj: Trajectory, radii, sizes, steps: int, seed: int = 0, repeats: int = 3):
    """Median-of-``repeats`` wall time of a ``steps``-step rollout per (radius, size) cell."""
    rows = []
    if steps == 0:
        return rows
    x_all = traj.frames()
    rng = np.random.default_rng(seed)
    subsets = {}
    for size in sizes:
        if not 1 <= size <= traj.num_particles:
            raise ValueError(f"size {size} outside [1, {traj.num_particles}]")
        subsets[size] = np.sort(rng.choice(traj.num_particles, size=size, replace=False))
    for radius in radii:
        for size in sizes:
            index = subsets[size]
            sim = Simulator(model, stats, radius, traj.bounds, traj.particle_type[index])
            init = x_all[:WINDOW + 1, index]
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                rollout(sim, init, steps)
                times.append(time.perf_counter() - t0)
            rows.append((radius, size, float(np.median(times))))
    return rows


def cmd_bench(args) -> None:
    model, stats, _ = _load_model(args.checkpoint, args.grid)
    traj = read_trajectory(args.data)
    seed = args.seed if args.seed is not None else 0
    sizes = args.sizes or [traj.num_particles]
    radii = args.radii or ([args.radius] if args.radius is not None else None)
    if radii is None:
        raise UsageError("bench needs --radii or --radius")
    announce("bench", {"checkpoint": str(args.checkpoint), "data": str(args.data), "radii": radii,
                       "sizes": sizes, "steps": args.steps, "threads": args.threads, "out": str(args.out)}, seed)
    with thread_limit(args.threads):
        rows = bench_rows(model, stats, traj, radii, sizes, args.steps, seed)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["radius", "size", "seconds"])
        for radius, size, sec in rows:
            writer.writerow([repr(float(radius)), size, f"{sec:.6f}"])
    print(f"wrote {len(rows)} rows to {args.out}")


def metrics_rows(pred: np.ndarray, truth: np.ndarray) -> list[list]:
    """Per-step position error (sum over axes, mean over particles) and volume metrics."""
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    err = ((pred - truth) ** 2).sum(axis=-1).mean(axis=-1)
    rows = []
    for t in range(len(pred)):
        dmin = volume_metrics(pred[t:t + 1])[0] if pred.shape[1] > 1 else float("nan")
        speed = float(np.linalg.norm(pred[t] - pred[t - 1], axis=-1).max()) if t > 0 else 0.0
        rows.append([t, float(err[t]), dmin, speed])
    return rows


def cmd_metrics(args) -> None:
    announce("metrics", {"pred": str(args.pred), "truth": str(args.truth), "out": str(args.out)}, args.seed)
    pred = read_trajectory(args.pred).frames()
    truth = read_trajectory(args.truth).frames()
    rows = metrics_rows(pred, truth)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "mse", "min_distance", "max_speed"])
        for row in rows:
            writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        rollout_mse = float(np.mean([r[1] for r in rows])) if rows else 0.0
        writer.writerow(["all", repr(rollout_mse), repr(float(np.mean([r[2] for r in rows]))) if rows else "nan",
                         repr(float(np.mean([r[3] for r in rows[1:]]))) if len(rows) > 1 else "0.0"])
    print(f"rollout mse {rollout_mse:.6g}")


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="giorom", description="Particle dynamics operator toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate-data", help="generate toy trajectories")
    p.add_argument("--out", help="output directory (default $GIOROM_DATA_DIR or ./data)")
    p.add_argument("--seed", type=int, default=0, help="first seed; files use consecutive seeds")
    p.add_argument("--count", type=int, default=25)
    p.add_argument("--particles", type=int, default=500)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--material", choices=["water", "sand", "plasticine", "elastic"], default="water")
    p.set_defaults(func=cmd_simulate_data)

    p = sub.add_parser("train", help="train an operator model")
    p.add_argument("--config", help="YAML with model, train and data sections")
    p.add_argument("--data", help="trajectory directory (default $GIOROM_DATA_DIR)")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--grid", type=int)
    p.add_argument("--modes", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--log", help="CSV training log (default: next to --out)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="autoregressive rollout on a trajectory's initial window")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="trajectory file")
    p.add_argument("--seed", type=int)
    p.add_argument("--radius", type=float)
    p.add_argument("--fraction", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--truth-out", help="also write the matching ground-truth subset")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("upsample", help="reconstruct a full-order trajectory from a reduced rollout")
    p.add_argument("--basis", required=True)
    p.add_argument("--reduced", required=True)
    p.add_argument("--reference", required=True, help="full-order trajectory; frame 0 is the reference cloud")
    p.add_argument("--fit-data", help="fit the basis on this trajectory directory and save it first")
    p.add_argument("--rank", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_upsample)

    p = sub.add_parser("bench", help="rollout wall time over radii and graph sizes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="trajectory whose first frames seed every rollout")
    p.add_argument("--radius", type=float)
    p.add_argument("--radii", type=float_list)
    p.add_argument("--sizes", type=int_list)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--grid", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("metrics", help="per-step and aggregate error of a predicted trajectory")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"giorom: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BlowUpError as exc:
        print(f"giorom: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"giorom: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
