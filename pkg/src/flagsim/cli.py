"""Command-line surface: simulate, gen-data, train, control, eval.

File formats: JSON for configs/models/logs, CSV for numeric series. Writes
are atomic (temp file then rename); a numerical failure flushes the partial
output with a marker and exits 2. Exit codes: 0 success, 1 input error,
2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile

import numpy as np

from . import learning
from .config import ConfigError, RunConfig, load_config
from .control import (
    ControlConfig,
    InverseMaps,
    run_closed_loop,
    write_control_log,
)
from .geometry import polyline_distance
from .learning import (
    DatasetSpec,
    MLPModel,
    TrainControls,
    fit_inverse_maps,
    fit_joint_inverse_map,
    generate_dataset,
    measure_cruise,
)
from .stepper import AngularVelocityProfile, SimulationError, simulate

TRAJECTORY_HEADER = "t,x,y,z,x1x,x1y,x1z,x2x,x2y,x2z,omega"
DATASET_HEADER = "t_H,t_L,h,alpha,beta,l"


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix=".part")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def trajectory_csv(traj) -> str:
    lines = [TRAJECTORY_HEADER]
    for i in range(traj.times.shape[0]):
        row = [traj.times[i], *traj.head[i], *traj.node1[i], *traj.node2[i], traj.omega[i]]
        lines.append(",".join(f"{v:.17g}" for v in row))
    return "\n".join(lines) + "\n"


def read_trajectory_csv(path):
    with open(path) as fh:
        header = fh.readline().strip()
        if header != TRAJECTORY_HEADER:
            raise ConfigError(f"unexpected trajectory header {header!r}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return data


def dataset_csv(datapoints) -> str:
    lines = [DATASET_HEADER]
    for d in datapoints:
        lines.append(",".join(f"{v:.17g}" for v in
                              (d.t_high, d.t_low, d.h, d.alpha, d.beta, d.l)))
    return "\n".join(lines) + "\n"


def read_dataset_csv(path):
    from .geometry import SteeringDatapoint

    points = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != DATASET_HEADER:
            raise ConfigError(f"unexpected dataset header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 6:
                raise ConfigError(f"malformed dataset row at line {lineno}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise ConfigError(f"malformed dataset row at line {lineno}: {exc}") from exc
            points.append(SteeringDatapoint(*vals))
    return points


def _load_profile(path, fallback_rpm: float) -> AngularVelocityProfile:
    if path is None:
        return AngularVelocityProfile.constant(fallback_rpm * 2 * math.pi / 60.0)
    with open(path) as fh:
        data = json.load(fh)
    if set(data) - {"breakpoints_rpm"}:
        raise ConfigError("profile file must hold only 'breakpoints_rpm'")
    pts = data["breakpoints_rpm"]
    times = np.array([p[0] for p in pts], dtype=float)
    omegas = np.array([p[1] for p in pts], dtype=float) * 2 * math.pi / 60.0
    return AngularVelocityProfile(times=times, omegas=omegas)


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, args.preset, seed=args.seed)
    profile = _load_profile(args.profile, cfg.control.omega_low_rpm)
    try:
        traj = simulate(cfg.physical, profile, args.duration,
                        cfg.control.observation_interval, controls=cfg.solver)
    except SimulationError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    _atomic_write(args.out, trajectory_csv(traj))
    print(f"wrote {args.out} ({traj.times.shape[0]} samples)")
    return 0


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.preset, seed=args.seed)
    with open(args.spec) as fh:
        raw = json.load(fh)
    allowed = {"total_time_s", "t_high_grid_s", "settle_time_s",
               "segments_per_trajectory", "seed"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown dataset-spec keys: {sorted(unknown)}")
    spec = DatasetSpec(
        total_time=float(raw["total_time_s"]),
        t_high_grid=tuple(float(v) for v in raw["t_high_grid_s"]),
        settle_time=float(raw.get("settle_time_s", cfg.control.startup_time)),
        segments_per_trajectory=int(raw.get("segments_per_trajectory", 8)),
        seed=int(raw.get("seed", cfg.seed)),
    )
    try:
        out = generate_dataset(
            cfg.physical, spec,
            omega_low=cfg.control.omega_low,
            omega_high=cfg.control.omega_high,
            omega_buckling=cfg.control.omega_buckling_rpm * 2 * math.pi / 60.0,
            controls=cfg.solver,
            dt_obs=cfg.control.observation_interval,
            k=cfg.control.history_length,
            workers=args.workers,
        )
    except SimulationError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    _atomic_write(args.out, dataset_csv(out.datapoints))
    meta = {
        "cruise_speed_m_s": out.cruise_speed,
        "cruise_direction": out.cruise_direction.tolist(),
        "n_datapoints": len(out.datapoints),
        "n_rejections": len(out.rejections),
        "spec": raw,
        "seed": spec.seed,
    }
    _atomic_write(os.path.splitext(args.out)[0] + "_meta.json",
                  json.dumps(meta, indent=1, sort_keys=True) + "\n")
    rej_lines = [json.dumps({"t_H": r.t_high, "t_end": r.t_end, "reason": r.reason},
                            sort_keys=True) for r in out.rejections]
    _atomic_write(os.path.splitext(args.out)[0] + "_rejections.jsonl",
                  "\n".join(rej_lines) + ("\n" if rej_lines else ""))
    print(f"wrote {args.out}: {len(out.datapoints)} datapoints, "
          f"{len(out.rejections)} rejections")
    return 0


def cmd_train(args) -> int:
    points = read_dataset_csv(args.dataset)
    if not points:
        print("dataset is empty", file=sys.stderr)
        return 1
    controls = TrainControls(seed=args.seed if args.seed is not None else 0)
    maps = fit_inverse_maps(points, controls)
    os.makedirs(args.out, exist_ok=True)
    report = {}
    for name, result in (("f_H", maps.f_high), ("f_L", maps.f_low),
                         ("f_beta", maps.f_beta), ("f_l", maps.f_l)):
        path = os.path.join(args.out, f"{name}.json")
        _atomic_write(path, json.dumps(result.model.to_json_dict(),
                                       indent=1, sort_keys=True) + "\n")
        report[name] = {"train_rmse": result.train_rmse,
                        "val_rmse": result.val_rmse, "epochs": result.epochs}
    meta_path = os.path.splitext(args.dataset)[0] + "_meta.json"
    calibration = {}
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
        calibration["cruise_speed_m_s"] = meta.get("cruise_speed_m_s")
    if args.joint:
        cruise = calibration.get("cruise_speed_m_s")
        if cruise is None:
            print("joint training needs the dataset meta file for the cruise speed",
                  file=sys.stderr)
            return 1
        joint = fit_joint_inverse_map(points, cruise, controls, scaled=True)
        _atomic_write(os.path.join(args.out, "f_HL_joint.json"),
                      json.dumps(joint.model.to_json_dict(), indent=1,
                                 sort_keys=True) + "\n")
        report["f_HL_joint"] = {"train_rmse": joint.train_rmse,
                                "val_rmse": joint.val_rmse,
                                "loss_shares": joint.loss_shares.tolist()}
    _atomic_write(os.path.join(args.out, "calibration.json"),
                  json.dumps(calibration, indent=1, sort_keys=True) + "\n")
    _atomic_write(os.path.join(args.out, "training_report.json"),
                  json.dumps(report, indent=1, sort_keys=True) + "\n")
    print(f"wrote 4 model files to {args.out}")
    return 0


def _load_maps(models_dir: str) -> tuple[InverseMaps, dict]:
    models = {}
    for name in ("f_H", "f_L", "f_beta", "f_l"):
        path = os.path.join(models_dir, f"{name}.json")
        if not os.path.exists(path):
            raise ConfigError(f"missing model file: {path}")
        models[name] = MLPModel.load(path)
    calib = {}
    calib_path = os.path.join(models_dir, "calibration.json")
    if os.path.exists(calib_path):
        with open(calib_path) as fh:
            calib = json.load(fh)
    return InverseMaps(models["f_H"], models["f_L"], models["f_beta"],
                       models["f_l"]), calib


def cmd_control(args) -> int:
    cfg = load_config(args.config, args.preset, seed=args.seed)
    maps, calib = _load_maps(args.models)
    with open(args.waypoints) as fh:
        pts = json.load(fh)
    waypoints = np.asarray(pts, dtype=float)
    if waypoints.ndim != 2 or waypoints.shape[1] != 3 or waypoints.shape[0] < 2:
        print("waypoints file must hold at least two [x, y, z] points",
              file=sys.stderr)
        return 1
    control_cfg = cfg.control
    if calib.get("cruise_speed_m_s"):
        from dataclasses import replace
        control_cfg = replace(control_cfg, cruise_speed=float(calib["cruise_speed_m_s"]))
    try:
        result = run_closed_loop(cfg.physical, maps, waypoints, control_cfg,
                                 controls=cfg.solver, max_duration=args.max_duration)
    except SimulationError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    base = os.path.splitext(args.out)[0]
    traj_like = type("T", (), {})()
    traj_like.times = result.times
    traj_like.head = result.head
    traj_like.node1 = result.node1
    traj_like.node2 = result.node2
    traj_like.omega = result.omega
    _atomic_write(args.out, trajectory_csv(traj_like))
    write_control_log(base + "_control_log.jsonl", result.log)
    err_lines = ["t,error"]
    err_lines += [f"{t:.17g},{e:.17g}" for t, e in zip(result.times, result.tracking_error)]
    _atomic_write(base + "_tracking_error.csv", "\n".join(err_lines) + "\n")
    print(f"wrote {args.out}, max tracking error "
          f"{float(np.max(result.tracking_error)):.4g} m")
    return 0


def steering_windows(times, omega, omega_buckling) -> list:
    """Contiguous above-buckling pulses, each extended by three durations."""
    windows = []
    above = omega > omega_buckling
    i = 0
    n = len(times)
    while i < n:
        if above[i]:
            j = i
            while j < n and above[j]:
                j += 1
            start = times[i]
            end = times[min(j, n - 1)]
            windows.append((start, end + 3.0 * (end - start)))
            i = j
        else:
            i += 1
    return windows


def cmd_eval(args) -> int:
    data = read_trajectory_csv(args.trajectory)
    with open(args.waypoints) as fh:
        waypoints = np.asarray(json.load(fh), dtype=float)
    times = data[:, 0]
    head = data[:, 1:4]
    omega = data[:, 10]
    errors = np.array([polyline_distance(h, waypoints) for h in head])
    omega_b = args.omega_buckling_rpm * 2 * math.pi / 60.0
    windows = steering_windows(times, omega, omega_b)
    per_window = []
    for start, end in windows:
        mask = (times >= start) & (times <= end)
        if np.any(mask):
            per_window.append({
                "start_s": float(start),
                "end_s": float(end),
                "max_error_m": float(np.max(errors[mask])),
            })
    summary = {
        "max_error_m": float(np.max(errors)),
        "median_error_m": float(np.median(errors)),
        "mean_error_m": float(np.mean(errors)),
        "per_steering_window": per_window,
    }
    _atomic_write(args.out, json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flagsim",
        description="Simulation and control of a uniflagellar swimming robot",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config overriding the preset")
        p.add_argument("--preset", default="desk", choices=["desk", "paper"])
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("simulate", help="run the forward dynamics")
    common(p)
    p.add_argument("--profile", default=None, help="JSON actuation schedule")
    p.add_argument("--duration", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gen-data", help="generate the steering dataset")
    common(p)
    p.add_argument("--spec", required=True, help="JSON dataset spec")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the inverse maps")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--joint", action="store_true",
                   help="also train the joint two-output map")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("control", help="run the closed-loop waypoint follower")
    common(p)
    p.add_argument("--models", required=True, help="directory of model JSON files")
    p.add_argument("--waypoints", required=True, help="JSON array of [x,y,z]")
    p.add_argument("--out", required=True)
    p.add_argument("--max-duration", type=float, default=2000.0)
    p.set_defaults(func=cmd_control)

    p = sub.add_parser("eval", help="tracking-error summary for a trajectory")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--waypoints", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--omega-buckling-rpm", type=float, default=10.0)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 1
    except SimulationError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
