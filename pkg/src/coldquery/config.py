"""Scenario files: a single TOML document describing one simulation.

Layout (sections optional unless noted; defaults match the library):

    seed = 1

    [trace]
    path = "trace.csv"            # mutually exclusive with [trace.synth]

    [trace.synth]                 # generated in memory / by gen-trace
    duration_s = 3600.0
    fps = 1.0
    seed = 5
    occurrence_rate = 0.2
    resolution = [1280, 720]

    [query]                       # required
    qtype = "retrieval"
    class_id = 0
    span_s = [0.0, 3600.0]
    fp_tol = 0.01
    fn_tol = 0.01
    levels = [30, 10, 5, 1]

    [network]
    uplink_bytes_per_s = 1048576.0
    downlink_bytes_per_s = 2097152.0

    [camera]
    preset = "embedded-default"   # or compute_rate = ..., detector_fps = ...

    [landmarks]
    interval = 30
    drop_p = 0.0
    spurious_rate = 0.0

    [policy]
    alpha = 0.5
    k_decline = 5.0
    beta = 2.0
    window_w = 50
    coverage_p = 0.95
    theta_rankdist = 0.5

    [difficulty]
    hard_fraction = 0.3
    base_hardness = 0.25
    hard_hardness = 1.0

    [index]                       # capture-time index corruption
    drop_p = 0.35
    spurious_rate = 0.05

    [run]
    abort_time_s = 120.0
    operator_limit = 40
    frozen_operator = false
    bin_s = 3600.0

Environment variables override nothing; what the file says is what runs.
"""
from __future__ import annotations

import hashlib

try:
    import tomllib
except ModuleNotFoundError:  # 3.10
    import tomli as tomllib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

from .baselines import IndexModel
from .operators import CAMERA_PRESETS, CameraModel
from .policies import PolicyConfig, QuerySpec
from .simkernel import NetworkModel, SimConfig, validate_config
from .trace import (DifficultyProfile, SynthParams, Trace,
                    default_synth_params, generate_trace, load_trace)


class ConfigError(ValueError):
    """A scenario file problem, reported with its section.key path."""


@dataclass
class Scenario:
    """A loaded scenario: the resolved simulation config, the index model
    for the capture-time-index baseline, and the file identity that goes
    into every output header."""
    cfg: SimConfig
    index: IndexModel
    config_hash: str
    synth: Optional[SynthParams]


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"{name}: expected a table")
    return sec


def _take(sec: dict, section: str, key: str, kind, default):
    if key not in sec:
        return default
    v = sec.pop(key)
    if kind is float and isinstance(v, int):
        v = float(v)
    if not isinstance(v, kind):
        raise ConfigError(f"{section}.{key}: expected {kind.__name__}, "
                          f"got {type(v).__name__}")
    return v


def _reject_unknown(sec: dict, section: str) -> None:
    if sec:
        raise ConfigError(f"{section}: unknown key {next(iter(sec))!r}")


def _build_synth(sec: dict) -> SynthParams:
    kw = {}
    for key, kind in (("duration_s", float), ("fps", float),
                      ("occurrence_rate", float), ("seed", int),
                      ("full_bytes", int), ("thumb_bytes", int),
                      ("trace_id", str)):
        if key in sec:
            v = _take(sec, "trace.synth", key, kind, None)
            kw[key] = v
    if "resolution" in sec:
        res = sec.pop("resolution")
        if (not isinstance(res, list) or len(res) != 2
                or not all(isinstance(x, int) for x in res)):
            raise ConfigError("trace.synth.resolution: expected [w, h]")
        kw["resolution"] = tuple(res)
    _reject_unknown(sec, "trace.synth")
    return default_synth_params(**kw)


def _build_query(sec: dict) -> QuerySpec:
    if "qtype" not in sec:
        raise ConfigError("query.qtype: required")
    qtype = _take(sec, "query", "qtype", str, None)
    class_id = _take(sec, "query", "class_id", int, 0)
    span = sec.pop("span_s", None)
    if (not isinstance(span, list) or len(span) != 2):
        raise ConfigError("query.span_s: expected [start, stop] seconds")
    kw = {}
    for key in ("fp_tol", "fn_tol"):
        if key in sec:
            kw[key] = _take(sec, "query", key, float, None)
    if "levels" in sec:
        lv = sec.pop("levels")
        if not isinstance(lv, list) or not all(isinstance(x, int) for x in lv):
            raise ConfigError("query.levels: expected a list of ints")
        kw["levels"] = tuple(lv)
    _reject_unknown(sec, "query")
    try:
        return QuerySpec(qtype, class_id, (float(span[0]), float(span[1])), **kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"query: {e}") from e


def _build_camera(sec: dict) -> CameraModel:
    if "preset" in sec:
        name = _take(sec, "camera", "preset", str, None)
        if name not in CAMERA_PRESETS:
            raise ConfigError(
                f"camera.preset: unknown {name!r}, "
                f"have {sorted(CAMERA_PRESETS)}")
        base = CAMERA_PRESETS[name]
    else:
        base = CAMERA_PRESETS["embedded-default"]
    rate = _take(sec, "camera", "compute_rate", float, base.compute_rate)
    det = _take(sec, "camera", "detector_fps", float, base.detector_fps)
    _reject_unknown(sec, "camera")
    if rate == base.compute_rate and det == base.detector_fps:
        return base
    return CameraModel(f"{base.name}-custom", rate, det)


def load_scenario(path, seed: Optional[int] = None,
                  verify: bool = False) -> Scenario:
    """Parse and validate one scenario file. `seed` overrides the file's
    seed; `verify` arms the kernel's runtime invariant checks."""
    raw = Path(path).read_bytes()
    try:
        doc = tomllib.loads(raw.decode("utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e

    trace_sec = _section(doc, "trace")
    synth_sec = trace_sec.pop("synth", None)
    tr_path = trace_sec.pop("path", None)
    _reject_unknown(trace_sec, "trace")
    if (synth_sec is None) == (tr_path is None):
        raise ConfigError("trace: give exactly one of path or [trace.synth]")
    synth = _build_synth(dict(synth_sec)) if synth_sec is not None else None
    if synth is not None:
        trace = generate_trace(synth)
    else:
        p = Path(tr_path)
        if not p.is_absolute():
            p = Path(path).parent / p
        trace = load_trace(p)

    query = _build_query(_section(doc, "query"))
    net_sec = _section(doc, "network")
    network = NetworkModel(
        _take(net_sec, "network", "uplink_bytes_per_s", float, 1048576.0),
        _take(net_sec, "network", "downlink_bytes_per_s", float, 2097152.0))
    _reject_unknown(net_sec, "network")
    camera = _build_camera(_section(doc, "camera"))

    lm = _section(doc, "landmarks")
    interval = _take(lm, "landmarks", "interval", int, 30)
    drop_p = _take(lm, "landmarks", "drop_p", float, 0.0)
    spurious = _take(lm, "landmarks", "spurious_rate", float, 0.0)
    _reject_unknown(lm, "landmarks")

    pol = _section(doc, "policy")
    try:
        policy = PolicyConfig(
            alpha=_take(pol, "policy", "alpha", float, 0.5),
            k_decline=_take(pol, "policy", "k_decline", float, 5.0),
            beta=_take(pol, "policy", "beta", float, 2.0),
            window_w=_take(pol, "policy", "window_w", int, 50),
            coverage_p=_take(pol, "policy", "coverage_p", float, 0.95),
            theta_rankdist=_take(pol, "policy", "theta_rankdist", float, 0.5))
    except ValueError as e:
        raise ConfigError(f"policy: {e}") from e
    _reject_unknown(pol, "policy")

    dif = _section(doc, "difficulty")
    difficulty = DifficultyProfile(
        hard_fraction=_take(dif, "difficulty", "hard_fraction", float, 0.3),
        base_hardness=_take(dif, "difficulty", "base_hardness", float, 0.25),
        hard_hardness=_take(dif, "difficulty", "hard_hardness", float, 1.0))
    _reject_unknown(dif, "difficulty")

    idx = _section(doc, "index")
    file_seed = doc.get("seed", 0)
    if not isinstance(file_seed, int):
        raise ConfigError("seed: expected int")
    use_seed = file_seed if seed is None else int(seed)
    try:
        index = IndexModel(
            drop_p=_take(idx, "index", "drop_p", float, 0.35),
            spurious_rate=_take(idx, "index", "spurious_rate", float, 0.05),
            seed=use_seed)
    except ValueError as e:
        raise ConfigError(f"index: {e}") from e
    _reject_unknown(idx, "index")

    rn = _section(doc, "run")
    abort = _take(rn, "run", "abort_time_s", float, None)
    cfg = SimConfig(
        trace=trace, query=query, camera=camera, network=network,
        policy=policy, landmark_interval=interval, landmark_drop_p=drop_p,
        landmark_spurious_rate=spurious, seed=use_seed,
        abort_time_s=abort,
        operator_limit=_take(rn, "run", "operator_limit", int, 40),
        frozen_operator=_take(rn, "run", "frozen_operator", bool, False),
        bin_s=_take(rn, "run", "bin_s", float, 3600.0),
        difficulty=difficulty, verify=verify)
    _reject_unknown(rn, "run")

    known = {"trace", "query", "network", "camera", "landmarks", "policy",
             "difficulty", "index", "run", "seed"}
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown section or key {key!r}")

    try:
        validate_config(cfg)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    digest = hashlib.sha256(raw).hexdigest()[:12]
    return Scenario(cfg=cfg, index=index, config_hash=digest, synth=synth)


def with_seed(scn: Scenario, seed: int) -> Scenario:
    """Same scenario, different seed (sweeps and multi-seed suites)."""
    return Scenario(cfg=replace(scn.cfg, seed=seed),
                    index=replace(scn.index, seed=seed),
                    config_hash=scn.config_hash, synth=scn.synth)
