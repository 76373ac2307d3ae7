"""Command-line entry point: simulate / infer / learn / eval / bench.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
numerical error.  Every run's randomness derives from --seed (or the config
seed when the flag is absent).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import io as rfio
from .bench import bench_point, loglog_slope, write_bench_csv
from .config import ConfigError, load_config
from .filtering import DegeneracyError, FilterConfig, run_filter
from .learning import LearnConfig, LearnProblem, learn_map
from .likelihood import NumericalDegeneracyError
from .metrics import evaluate
from .neuralmap import init_params, predict_map
from .scenario import build_anchors, simulate


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser():
    parser = _Parser(prog="rfslam", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None,
                        help="cap worker parallelism in the likelihood batches")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="synthesize measurements and truth")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("infer", help="run the particle filter over measurements")
    p.add_argument("--config", required=True)
    p.add_argument("--measurements", required=True)
    p.add_argument("--truth", required=True,
                   help="sidecar truth file (the heading measurements live there)")
    p.add_argument("--checkpoint", default=None,
                   help="multipath-map checkpoint; omit for the direct-path-only model")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("learn", help="fit the multipath map by variational EM")
    p.add_argument("--config", required=True)
    p.add_argument("--measurements", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--em-iters", type=int, default=None)
    p.add_argument("--adam-steps", type=int, default=None)
    p.add_argument("--segment-k0", type=int, default=None)
    p.add_argument("--subset-p0", type=int, default=None)
    p.add_argument("--supervised", action="store_true")
    p.add_argument("--learn-chi", action="store_true")
    p.add_argument("--mmse-points", action="store_true")

    p = sub.add_parser("eval", help="score a track (and optionally a map) against truth")
    p.add_argument("--truth", required=True)
    p.add_argument("--track", required=True)
    p.add_argument("--checkpoint", default=None,
                   help="score the learned map too (requires --config)")
    p.add_argument("--config", default=None,
                   help="run config; needed with --checkpoint for station positions")
    p.add_argument("--out", required=True, help="report JSON path")

    p = sub.add_parser("bench", help="likelihood kernel scaling study")
    p.add_argument("--likelihood", action="store_true", required=True)
    p.add_argument("--ms", default="32,64,128,256",
                   help="comma-separated M values (m_a is fixed at 4)")
    p.add_argument("--rank", type=int, default=8, help="R = features + 1")
    p.add_argument("--batch", type=int, default=4096)
    p.add_argument("--dense-subsample", type=int, default=128,
                   help="dense reference elements timed per batch (scaled up)")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV path")
    return parser


def cmd_simulate(args) -> int:
    run = load_config(args.config, seed_override=args.seed)
    truth, frames = simulate(run.scenario, run.cfg, run.geo, run.cal)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rfio.write_measurements(out / "measurements.rfsl", frames, run.cfg.m_f,
                            run.cfg.m_a)
    rfio.write_truth(out / "truth.rfst", truth)
    print(f"simulated J={run.scenario.n_stations} K={run.scenario.n_steps} "
          f"M={run.cfg.m_total} -> {out}")
    return 0


def _load_features(checkpoint, bs_positions):
    if checkpoint is None:
        return None, None, None
    arch, theta, _, cal = rfio.read_checkpoint(checkpoint)
    banks = [predict_map(bs_positions[j], theta, arch)
             for j in range(len(bs_positions))]
    return banks, arch, theta


def cmd_infer(args) -> int:
    run = load_config(args.config, seed_override=args.seed)
    frames, m_f, m_a = rfio.read_measurements(args.measurements)
    if (m_f, m_a) != (run.cfg.m_f, run.cfg.m_a):
        raise ContainerMismatch(
            f"measurement grid {m_f}x{m_a} does not match config "
            f"{run.cfg.m_f}x{run.cfg.m_a}")
    truth = rfio.read_truth(args.truth)
    banks, arch, _ = _load_features(args.checkpoint, run.scenario.bs_positions)
    if banks is not None:
        print(f"loaded map checkpoint with D={arch.n_features} features per station")
    fcfg = run.fcfg if args.threads is None else dataclasses.replace(
        run.fcfg, threads=args.threads)
    result = run_filter(frames, truth.imu_orientation, run.scenario.bs_positions,
                        run.motion, run.los, run.noise, run.priors, fcfg, run.cfg,
                        run.geo, run.cal, features=banks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rfio.write_track_csv(out / "track.csv", result.estimates,
                         run.scenario.n_stations)
    rfio.write_snapshots(out / "snapshots.rfss", result.snapshots)
    print(f"filtered K={len(frames)} steps -> {out / 'track.csv'}")
    return 0


class ContainerMismatch(RuntimeError):
    pass


def cmd_learn(args) -> int:
    run = load_config(args.config, seed_override=args.seed)
    frames, m_f, m_a = rfio.read_measurements(args.measurements)
    truth = rfio.read_truth(args.truth)
    learn_cfg = run.learn
    overrides = {}
    if args.em_iters is not None:
        overrides["em_iters"] = args.em_iters
    if args.adam_steps is not None:
        overrides["adam_steps"] = args.adam_steps
    if args.segment_k0 is not None:
        overrides["segment_len"] = args.segment_k0
    if args.supervised:
        overrides["supervised"] = True
    if args.learn_chi:
        overrides["learn_chi"] = True
    if args.mmse_points:
        overrides["use_mmse_points"] = True
    if overrides:
        learn_cfg = dataclasses.replace(learn_cfg, **overrides)
    fcfg = run.fcfg
    if args.subset_p0 is not None:
        fcfg = dataclasses.replace(fcfg, n_subset=args.subset_p0)
    if args.threads is not None:
        fcfg = dataclasses.replace(fcfg, threads=args.threads)
    if learn_cfg.supervised and truth.mt_states is None:
        raise UsageError("--supervised requires a truth file with states")

    streams = run.stream_seeds
    rng = np.random.default_rng(streams[2])
    scene_pts = np.vstack([run.scenario.bs_positions,
                           run.scenario.trajectory.waypoints])
    margin = 0.25 * (scene_pts.max(axis=0) - scene_pts.min(axis=0) + 1.0)
    theta = init_params(run.arch, rng, bbox_min=scene_pts.min(axis=0) - margin,
                        bbox_max=scene_pts.max(axis=0) + margin,
                        gamma_hint=run.gamma_hint)
    problem = LearnProblem(frames=frames, imu_orientation=truth.imu_orientation,
                           bs_positions=run.scenario.bs_positions,
                           motion=run.motion, los=run.los, noise=run.noise,
                           priors=run.priors, fcfg=fcfg, cfg=run.cfg, geo=run.geo,
                           arch=run.arch,
                           truth_states=truth.mt_states if learn_cfg.supervised
                           else None)
    theta, chi, log, _ = learn_map(problem, theta, run.cal, learn_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rfio.write_checkpoint(out / "map.rfnn", run.arch, theta,
                          calibration=chi if learn_cfg.learn_chi else None)
    rfio.write_training_log_csv(out / "training_log.csv", log)
    if log:
        print(f"learned {learn_cfg.em_iters} iterations, final Q = {log[-1].q_after:.3f} "
              f"-> {out / 'map.rfnn'}")
    else:
        print(f"no iterations requested; wrote initialization -> {out / 'map.rfnn'}")
    return 0


def cmd_eval(args) -> int:
    truth = rfio.read_truth(args.truth)
    _, states, p_vis, _, _ = rfio.read_track_csv(args.track)
    n_steps = truth.los_flags.shape[0]
    est_xy = states[1:n_steps + 1, 0:2]  # skip the prior row
    truth_xy = truth.mt_states[1:n_steps + 1, 0:2]
    learned_banks = None
    true_anchors = None
    if args.checkpoint:
        if not args.config:
            raise UsageError("eval --checkpoint also needs --config for the "
                             "station positions")
        run = load_config(args.config)
        arch, theta, _, _ = rfio.read_checkpoint(args.checkpoint)
        learned_banks = [predict_map(bs, theta, arch)
                         for bs in run.scenario.bs_positions]
        true_anchors = truth.anchors
    report = evaluate(truth_xy, est_xy, truth.los_flags, p_vis[1:n_steps + 1],
                      true_anchors, learned_banks)
    with open(args.out, "w") as f:
        json.dump(report.to_dict(), f, indent=2)
    print(f"rmse={report.rmse:.3f} m median={report.median_error:.3f} m "
          f"-> {args.out}")
    return 0


def cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    ms = [int(v) for v in str(args.ms).split(",") if v]
    rows = []
    for m in ms:
        if m % 4:
            raise UsageError(f"--ms values must be multiples of the antenna count 4; got {m}")
        rows.append(bench_point(m // 4, 4, args.rank - 1, args.batch, rng,
                                repeats=args.repeats,
                                dense_subsample=args.dense_subsample))
    write_bench_csv(args.out, rows)
    if len(rows) >= 2:
        s_dense = loglog_slope([r.m for r in rows], [r.dense_ns for r in rows])
        s_fast = loglog_slope([r.m for r in rows], [r.woodbury_ns for r in rows])
        print(f"dense log-log slope {s_dense:.2f}, low-rank slope {s_fast:.2f}")
    worst = max(r.max_rel_err for r in rows)
    print(f"{len(rows)} rows -> {args.out} (max rel err {worst:.2e})")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "infer":
            return cmd_infer(args)
        if args.command == "learn":
            return cmd_learn(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "bench":
            return cmd_bench(args)
        raise UsageError(f"unknown command {args.command}")
    except (ConfigError, UsageError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (OSError, DegeneracyError, NumericalDegeneracyError, ContainerMismatch,
            rfio.ContainerError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
