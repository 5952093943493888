"""Run artifacts: delimited logs, summaries, and rendered figures.

Every CSV starts with a `# config_hash=... seed=...` comment so a result
file can be traced back to the exact scenario that produced it, and the
data rows are formatted deterministically so re-running a seeded
scenario reproduces each file byte for byte. Figures are rendered next
to the CSVs they draw from.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .operators import flops  # noqa: E402
from .policies import MAXCOUNT, RETRIEVAL, TAGGING  # noqa: E402
from .simkernel import SimConfig, SimResult, milestone_time  # noqa: E402

MILESTONES = (0.5, 0.9, 0.99)


def _open(path):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return open(p, "w", encoding="utf-8", newline="")


def _header(f, config_hash: str, seed: int) -> None:
    f.write(f"# config_hash={config_hash} seed={seed}\n")


def write_events_csv(path, res: SimResult, config_hash: str) -> None:
    with _open(path) as f:
        _header(f, config_hash, res.seed)
        w = csv.writer(f)
        w.writerow(["time_s", "kind", "payload"])
        for ev in res.events:
            w.writerow([repr(ev.time_s), ev.kind,
                        json.dumps(ev.payload, sort_keys=True,
                                   separators=(",", ":"))])


def write_progress_csv(path, res: SimResult, config_hash: str) -> None:
    p = res.result.progress
    with _open(path) as f:
        _header(f, config_hash, res.seed)
        w = csv.writer(f)
        w.writerow(["time_s", "metric", "value"])
        for t, v in zip(p.times, p.values):
            w.writerow([repr(t), p.metric, repr(v)])


def write_decisions_csv(path, res: SimResult, config_hash: str) -> None:
    with _open(path) as f:
        _header(f, config_hash, res.seed)
        w = csv.writer(f)
        w.writerow(["time_s", "decision", "operator_id", "f_value", "reason"])
        for d in res.decisions:
            w.writerow([repr(d.time_s), d.decision, d.operator_id,
                        repr(d.f_value), d.reason])


def write_family_csv(path, states: Sequence, config_hash: str,
                     seed: int) -> None:
    """Candidate dump: one row per trained operator state."""
    with _open(path) as f:
        _header(f, config_hash, seed)
        w = csv.writer(f)
        w.writerow(["id", "conv", "kernel", "dense", "input", "region",
                    "flops", "model_bytes", "fps_cam", "auc", "gamma"])
        for st in states:
            sp = st.spec
            r = sp.region
            w.writerow([st.op_id, sp.conv_layers, sp.kernel,
                        sp.dense, sp.input_px,
                        f"{r.x}+{r.y}+{r.w}x{r.h}", repr(flops(sp)),
                        st.model_bytes, repr(st.fps_cam),
                        repr(st.measured_auc), repr(st.measured_gamma)])


# ------------------------------------------------------------------ summaries

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def summarize(res: SimResult, cfg: SimConfig) -> list[tuple]:
    """Flatten one run into (metric, value, unit) rows."""
    qt = cfg.query.qtype
    streaming = sum(fr.full_bytes for fr in cfg.trace.frames)
    rows = [
        ("finished", res.finished, "bool"),
        ("t_end", res.t_end, "s"),
        ("bytes_uplink", res.bytes_uplink, "B"),
        ("bytes_downlink", res.bytes_downlink, "B"),
        ("streaming_bytes", streaming, "B"),
        ("traffic_savings", streaming / res.bytes_uplink
         if res.bytes_uplink else math.inf, "x"),
        ("n_events", len(res.events), "count"),
        ("n_switches", len(res.switches), "count"),
        ("switches", ";".join(f"{repr(t)}:{op}" for t, op in res.switches),
         "list"),
    ]
    prog = res.result.progress
    if qt == RETRIEVAL:
        rows.append(("n_results", sum(1 for e in res.events
                                      if e.kind == "result_emitted"), "count"))
        for tgt in MILESTONES:
            t = milestone_time(prog, tgt)
            rows.append((f"t{int(tgt * 100)}",
                         math.nan if t is None else t, "s"))
    elif qt == TAGGING:
        for ev in res.events:
            if ev.kind == "pass_completed" and "level" in ev.payload:
                rows.append((f"level_{ev.payload['level']}", ev.time_s, "s"))
        by_src: dict[str, int] = {}
        seen: dict[int, str] = {}
        for ev in res.events:
            if ev.kind == "result_emitted":
                seen[ev.payload["frame"]] = ev.payload.get("source", "cloud")
        for src in seen.values():
            by_src[src] = by_src.get(src, 0) + 1
        for src in sorted(by_src):
            rows.append((f"tags_{src}", by_src[src], "count"))
    elif qt == MAXCOUNT:
        ans = res.result.answer or {}
        rows.append(("answer_count", ans.get("count", math.nan), "count"))
        rows.append(("answer_frame", ans.get("frame", -1), "frame"))
        t = milestone_time(prog, ans["count"]) if ans else None
        rows.append(("t_max", math.nan if t is None else t, "s"))
    else:
        rows.append(("estimate", res.result.answer, "count"))
        last_n = next((e.payload["n"] for e in reversed(res.events)
                       if e.kind == "result_emitted"), 0)
        rows.append(("n_samples", last_n, "count"))
        rows.append(("t_converged", _convergence_time(prog), "s"))
    return rows


def _convergence_time(prog, tol: float = 0.01) -> float:
    """First time the estimate enters and stays within tol of its final
    value (relative when the final is nonzero)."""
    if not prog.values:
        return math.nan
    final = prog.values[-1]
    bound = abs(final) * tol if final else tol
    t = prog.times[0]
    for tt, v in zip(prog.times, prog.values):
        if abs(v - final) > bound:
            t = None
        elif t is None:
            t = tt
    return math.nan if t is None else t


def write_summary_csv(path, res: SimResult, cfg: SimConfig,
                      config_hash: str) -> None:
    with _open(path) as f:
        _header(f, config_hash, res.seed)
        w = csv.writer(f)
        w.writerow(["metric", "value", "unit"])
        for metric, value, unit in summarize(res, cfg):
            w.writerow([metric, _fmt(value), unit])


# ---------------------------------------------------------------- comparisons

def write_compare_csv(path, results: dict[str, SimResult],
                      config_hash: str, seed: int) -> None:
    """Joined progress curves: system,time_s,metric,value."""
    with _open(path) as f:
        _header(f, config_hash, seed)
        w = csv.writer(f)
        w.writerow(["system", "time_s", "metric", "value"])
        for system, res in results.items():
            p = res.result.progress
            for t, v in zip(p.times, p.values):
                w.writerow([system, repr(t), p.metric, repr(v)])


def write_speedup_csv(path, results: dict[str, SimResult], config_hash: str,
                      seed: int, baseline: str = "zc2") -> None:
    """Milestone table, columns per system: each cell is that system's
    time as a multiple of the baseline's (1.0 in the baseline column)."""
    systems = list(results)
    with _open(path) as f:
        _header(f, config_hash, seed)
        w = csv.writer(f)
        w.writerow(["milestone"] + systems)
        for tgt in MILESTONES:
            ref = milestone_time(results[baseline].result.progress, tgt) \
                if baseline in results else None
            row = [f"t{int(tgt * 100)}"]
            for system in systems:
                t = milestone_time(results[system].result.progress, tgt)
                if t is None or ref is None or ref == 0:
                    row.append("nan")
                else:
                    row.append(repr(t / ref))
            w.writerow(row)


def write_sweep_csv(path, axis: str, rows: list[dict], config_hash: str,
                    seed: int) -> None:
    """One aggregated row per swept value (plus the frozen-variant columns
    when the sweep produced them)."""
    cols = [axis] + [k for k in rows[0] if k != axis]
    with _open(path) as f:
        _header(f, config_hash, seed)
        w = csv.writer(f)
        w.writerow(cols)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in cols])


# ------------------------------------------------------------------- figures

def render_progress(path, res: SimResult, cfg: SimConfig) -> None:
    p = res.result.progress
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.step(p.times, p.values, where="post")
    ax.set_xlabel("time (s)")
    ax.set_ylabel(p.metric)
    ax.set_title(f"{cfg.query.qtype} (seed {res.seed})")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_compare(path, results: dict[str, SimResult],
                   cfg: SimConfig) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    for system, res in results.items():
        p = res.result.progress
        ax.step(p.times, p.values, where="post", label=system)
    ax.set_xlabel("time (s)")
    ax.set_ylabel(next(iter(results.values())).result.progress.metric)
    ax.set_title(f"{cfg.query.qtype} comparison")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_sweep(path, axis: str, rows: list[dict],
                 metric: Optional[str] = None) -> None:
    if metric is None:
        metric = next((m for m in ("t99", "t_end") if m in rows[0]), None)
    xs = [row[axis] for row in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(xs, [row.get(metric, math.nan) for row in rows],
            marker="o", label="adaptive")
    frozen_key = f"frozen_{metric}"
    if any(frozen_key in row for row in rows):
        ax.plot(xs, [row.get(frozen_key, math.nan) for row in rows],
                marker="s", label="frozen")
        ax.legend()
    ax.set_xlabel(axis)
    ax.set_ylabel(f"{metric} (s)")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
