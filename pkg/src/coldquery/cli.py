"""Command-line front end.

    coldquery gen-trace       --config scenario.toml --out out/
    coldquery run             --config scenario.toml --out out/
    coldquery compare         --config scenario.toml --out out/ \
                              --systems zc2,cloudonly,optop,preindexall
    coldquery sweep           --config scenario.toml --out out/ \
                              --axis uplink_bandwidth --values 0.5e6,1e6,2e6
    coldquery validate-config --config scenario.toml

Each run writes the event log, progress curve, decision log, and a
metric summary as CSV, plus a rendered figure of the headline curve.
Re-running with the same scenario and seed reproduces the CSV files
byte for byte.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import report
from .baselines import SYSTEMS, run_system
from .config import ConfigError, Scenario, load_scenario, with_seed
from .operators import CameraModel
from .simkernel import SimConfig, VerifyError, derive_family, milestone_time
from .trace import generate_trace, save_trace

AXES = ("uplink_bandwidth", "camera_compute", "landmark_interval",
        "landmark_corruption", "alpha", "beta")

# axes where the resource changes and the adaptation question applies:
# each swept value also runs with the operator pinned to what the
# unmodified scenario selects
ADAPTIVE_AXES = ("uplink_bandwidth", "camera_compute")


def _apply_axis(cfg: SimConfig, axis: str, value: float) -> SimConfig:
    if axis == "uplink_bandwidth":
        return replace(cfg, network=replace(cfg.network,
                                            uplink_bytes_per_s=value))
    if axis == "camera_compute":
        cam = cfg.camera
        return replace(cfg, camera=CameraModel(f"{cam.name}@{value:g}",
                                               value, cam.detector_fps))
    if axis == "landmark_interval":
        return replace(cfg, landmark_interval=int(value))
    if axis == "landmark_corruption":
        return replace(cfg, landmark_drop_p=value)
    if axis == "alpha":
        return replace(cfg, policy=replace(cfg.policy, alpha=value))
    if axis == "beta":
        return replace(cfg, policy=replace(cfg.policy, beta=value))
    raise ValueError(f"unknown axis {axis!r}")


def _write_run(outdir: Path, res, cfg: SimConfig, config_hash: str) -> None:
    report.write_events_csv(outdir / "events.csv", res, config_hash)
    report.write_progress_csv(outdir / "progress.csv", res, config_hash)
    report.write_decisions_csv(outdir / "decisions.csv", res, config_hash)
    report.write_summary_csv(outdir / "summary.csv", res, cfg, config_hash)
    report.render_progress(outdir / "progress.png", res, cfg)


def cmd_gen_trace(scn: Scenario, out: Path, seed) -> int:
    if scn.synth is None:
        print("gen-trace needs a [trace.synth] section", file=sys.stderr)
        return 1
    params = scn.synth if seed is None else replace(scn.synth, seed=seed)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "trace.csv"
    save_trace(generate_trace(params), path)
    print(path)
    return 0


def cmd_run(scn: Scenario, out: Path) -> int:
    res = run_system(scn.cfg, "zc2")
    out.mkdir(parents=True, exist_ok=True)
    _write_run(out, res, scn.cfg, scn.config_hash)
    for metric, value, unit in report.summarize(res, scn.cfg):
        print(f"{metric}={value} [{unit}]")
    return 0


def cmd_compare(scn: Scenario, out: Path, systems: list[str]) -> int:
    results = {}
    for system in systems:
        res = run_system(scn.cfg, system, scn.index)
        results[system] = res
        report.write_summary_csv(out / f"summary_{system}.csv", res, scn.cfg,
                                 scn.config_hash)
    report.write_compare_csv(out / "compare.csv", results, scn.config_hash,
                             scn.cfg.seed)
    report.write_speedup_csv(out / "speedup.csv", results, scn.config_hash,
                             scn.cfg.seed,
                             baseline="zc2" if "zc2" in systems else systems[0])
    report.render_compare(out / "compare.png", results, scn.cfg)
    print(out / "compare.csv")
    return 0


def _milestone_rows(res) -> dict:
    prog = res.result.progress
    out = {}
    if prog.metric == "recall":
        for tgt in report.MILESTONES:
            t = milestone_time(prog, tgt)
            out[f"t{int(tgt * 100)}"] = float("nan") if t is None else t
    return out


def cmd_sweep(scn: Scenario, out: Path, axis: str, values: list[float]) -> int:
    if axis not in AXES:
        print(f"unknown axis {axis!r}; have {AXES}", file=sys.stderr)
        return 1
    frozen_spec = None
    if axis in ADAPTIVE_AXES:
        # what would the unmodified scenario deploy first? pin that
        base = run_system(scn.cfg, "zc2")
        first_op = next(d.operator_id for d in base.decisions
                        if d.decision in ("deploy", "fallback"))
        frozen_spec = derive_family(scn.cfg)[first_op]
    rows = []
    for value in values:
        cfg_v = _apply_axis(scn.cfg, axis, value)
        res = run_system(cfg_v, "zc2")
        sub = out / f"{axis}={value:g}"
        _write_run(sub, res, cfg_v, scn.config_hash)
        row = {axis: value, "t_end": res.t_end,
               "bytes_uplink": res.bytes_uplink,
               "finished": res.finished}
        row.update(_milestone_rows(res))
        if frozen_spec is not None:
            fcfg = replace(cfg_v, operator_family=[frozen_spec],
                           frozen_operator=True)
            fres = run_system(fcfg, "zc2")
            row["frozen_t_end"] = fres.t_end
            for k, v in _milestone_rows(fres).items():
                row[f"frozen_{k}"] = v
        rows.append(row)
    report.write_sweep_csv(out / "sweep.csv", axis, rows, scn.config_hash,
                           scn.cfg.seed)
    report.render_sweep(out / "sweep.png", axis, rows)
    print(out / "sweep.csv")
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="coldquery",
        description="query-execution simulator over stored video traces")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("gen-trace", "run", "compare", "sweep", "validate-config"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="scenario TOML file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed "
                            "(gen-trace: the synth seed)")
        p.add_argument("--verify", action="store_true",
                       help="enable runtime invariant checks")
        if name != "validate-config":
            p.add_argument("--out", required=True, help="output directory")
        if name == "compare":
            p.add_argument("--systems", default=",".join(SYSTEMS),
                           help=f"comma list from {SYSTEMS}")
        if name == "sweep":
            p.add_argument("--axis", required=True, help=f"one of {AXES}")
            p.add_argument("--values", required=True,
                           help="comma-separated numbers")
    args = ap.parse_args(argv)

    try:
        scn = load_scenario(args.config, seed=args.seed, verify=args.verify)
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1

    try:
        if args.command == "validate-config":
            print("ok")
            return 0
        out = Path(args.out)
        if args.command == "gen-trace":
            return cmd_gen_trace(scn, out, args.seed)
        if args.command == "run":
            return cmd_run(scn, out)
        if args.command == "compare":
            systems = [s.strip() for s in args.systems.split(",") if s.strip()]
            bad = [s for s in systems if s not in SYSTEMS]
            if bad:
                print(f"unknown systems {bad}; have {SYSTEMS}",
                      file=sys.stderr)
                return 1
            out.mkdir(parents=True, exist_ok=True)
            return cmd_compare(scn, out, systems)
        if args.command == "sweep":
            values = [float(v) for v in args.values.split(",") if v.strip()]
            if not values:
                print("no sweep values", file=sys.stderr)
                return 1
            out.mkdir(parents=True, exist_ok=True)
            return cmd_sweep(scn, out, args.axis, values)
    except VerifyError as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
