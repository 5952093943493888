"""Simulated on-camera operators: tiny per-query NNs spanning a wide
speed/accuracy range.

An operator is an architecture (conv depth, kernel width, dense width,
input size) applied to a crop region of the frame.  We do not run real
networks; instead each operator scores a frame as

    score = clamp01(signal + hardness * noise),  noise ~ N(0, sigma)

where signal is the region-visible ground truth (presence for retrieval
and tagging rankers, normalized count for counting rankers) and sigma
shrinks with training set size along an exponential learning curve.
sigma's floor falls with model capacity and with input pixel density on
the crop (a small crop at full input resolution sees objects large and
clear; a full frame squeezed to 100px sees almost nothing), which is
what makes knowledge-derived crops genuinely better, not just faster.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import rankdata

from .trace import FrameRecord, Rect

DEFAULT_GRID = {
    "conv_layers": (2, 3, 4, 5),
    "kernel": (8, 16, 32),
    "dense": (16, 32, 64),
    "input_px": (25, 50, 100),
}

FLOPS_UNIT = 1e-3          # abstract flop units per (ops) so numbers stay small
FLOPS_LO = 90.0            # cheapest grid member
FLOPS_HI = 51840.0         # most expensive grid member
SIGMA0 = 0.9               # untrained noise level
SIGMA_CAP = 0.85           # worst useful floor; saturated operators sit here
SIGMA_MIN_RANGE = (0.04, 0.5)    # capacity-mapped floor, most to least capable
TAU_RANGE = (50.0, 350.0)        # learning-curve samples, small to large capacity
# Pixel-density anchor: 100px input watching a typical knowledge crop
# (a fifth of a 720p frame). Denser inputs gain a little accuracy,
# sparser ones lose a lot; a full frame squeezed into 25px lands at
# SIGMA_CAP no matter the architecture.
DENSITY_REF = 100.0 ** 2 / (0.2 * 1280 * 720)
DENSITY_EXP = 0.8
LABEL_NOISE_COEFF = 1.0
MODEL_BYTES_RANGE = (200_000, 15_000_000)
TRAIN_S_RANGE = (5.0, 45.0)
BOOTSTRAP_MIN = 200        # minimum samples before a first training run
COUNT_NORM = 10.0          # counts saturate here in the ranking signal


@dataclass(frozen=True)
class OperatorSpec:
    conv_layers: int
    kernel: int
    dense: int
    input_px: int
    region: Rect


@dataclass(frozen=True)
class CameraModel:
    name: str
    compute_rate: float        # flop units per second
    detector_fps: float = 0.1  # capture-time landmark detector budget


CAMERA_PRESETS = {
    "embedded-default": CameraModel("embedded-default", 1.3e6),
    "embedded-fast": CameraModel("embedded-fast", 2.6e6),
    "embedded-slow": CameraModel("embedded-slow", 0.65e6),
}


def flops(spec: OperatorSpec) -> float:
    return (spec.conv_layers * spec.kernel ** 2 + spec.dense) * spec.input_px ** 2 * FLOPS_UNIT


def _log_pos(value, lo, hi) -> float:
    t = (math.log(value) - math.log(lo)) / (math.log(hi) - math.log(lo))
    return min(1.0, max(0.0, t))


def _log_interp(value, lo, hi, out_lo, out_hi):
    return out_lo + _log_pos(value, lo, hi) * (out_hi - out_lo)


def operator_fps(spec: OperatorSpec, camera: CameraModel) -> float:
    return camera.compute_rate / flops(spec)


def model_bytes(spec: OperatorSpec) -> int:
    return int(_log_interp(flops(spec), FLOPS_LO, FLOPS_HI, *MODEL_BYTES_RANGE))


def train_latency_s(spec: OperatorSpec) -> float:
    return _log_interp(flops(spec), FLOPS_LO, FLOPS_HI, *TRAIN_S_RANGE)


def _capacity(spec: OperatorSpec) -> float:
    return spec.conv_layers * spec.kernel ** 2 * spec.dense


_CAP_LO = 2 * 8 ** 2 * 16
_CAP_HI = 5 * 32 ** 2 * 64


def sigma_floor(spec: OperatorSpec) -> float:
    """Best achievable noise level: falls with capacity (steeply at
    first), falls with pixel density on the region, clamped to a sane
    band."""
    t = _log_pos(_capacity(spec), _CAP_LO, _CAP_HI)
    lo, hi = SIGMA_MIN_RANGE
    base = hi + (lo - hi) * math.sqrt(t)
    density = spec.input_px ** 2 / spec.region.area
    g = (DENSITY_REF / density) ** DENSITY_EXP
    return min(SIGMA_CAP, max(0.02, base * g))


def tau(spec: OperatorSpec) -> float:
    """Learning-curve scale in samples. Keyed on capacity, not flops:
    input size buys compute cost without adding parameters to fit."""
    return _log_interp(_capacity(spec), _CAP_LO, _CAP_HI, *TAU_RANGE)


def sigma_at(spec: OperatorSpec, n_train: int, label_noise: float = 0.0) -> float:
    """Learning curve. label_noise is the fraction of wrong labels in the
    training pool; it lifts the achievable floor."""
    floor = min(SIGMA_CAP, sigma_floor(spec) + LABEL_NOISE_COEFF * label_noise)
    return floor + (SIGMA0 - floor) * math.exp(-n_train / tau(spec))


@dataclass
class OperatorState:
    op_id: int
    spec: OperatorSpec
    fps_cam: float
    sigma: float
    n_train: int
    label_noise: float = 0.0
    measured_auc: float | None = None
    measured_gamma: float | None = None
    t_low: float | None = None
    t_high: float | None = None

    @property
    def model_bytes(self) -> int:
        return model_bytes(self.spec)

    @property
    def train_latency_s(self) -> float:
        return train_latency_s(self.spec)


def make_state(spec: OperatorSpec, op_id: int, camera: CameraModel,
               n_train: int, label_noise: float = 0.0) -> OperatorState:
    if n_train < BOOTSTRAP_MIN:
        raise ValueError(f"need >= {BOOTSTRAP_MIN} samples to train, got {n_train}")
    return OperatorState(op_id, spec, operator_fps(spec, camera),
                         sigma_at(spec, n_train, label_noise), n_train, label_noise)


def retrain(state: OperatorState, n_train: int, label_noise: float = 0.0) -> OperatorState:
    if n_train < BOOTSTRAP_MIN:
        raise ValueError(f"need >= {BOOTSTRAP_MIN} samples to train, got {n_train}")
    return replace(state, n_train=n_train, label_noise=label_noise,
                   sigma=sigma_at(state.spec, n_train, label_noise))


def region_signal(frame: FrameRecord, class_id: int, region: Rect,
                  mode: str = "presence") -> float:
    c = frame.count(class_id, region)
    if mode == "presence":
        return 1.0 if c > 0 else 0.0
    if mode == "count":
        return min(c / COUNT_NORM, 1.0)
    raise ValueError(f"unknown signal mode {mode!r}")


def score_frame(state: OperatorState, frame: FrameRecord, class_id: int,
                rng, hardness: float = 1.0, mode: str = "presence") -> float:
    s = region_signal(frame, class_id, state.spec.region, mode)
    if state.sigma > 0.0:
        s += hardness * state.sigma * rng.standard_normal()
    return min(1.0, max(0.0, s))


# ------------------------------------------------------- cloud-side measurement

def auc(scores, labels) -> float:
    """Rank AUC with half credit for ties. 0.5 when one class is absent."""
    y = np.asarray(labels, dtype=bool)
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        return 0.5
    ranks = rankdata(np.asarray(scores, dtype=float))
    return float((ranks[y].sum() - n1 * (n1 + 1) / 2) / (n0 * n1))


def calibrate(scores, labels, fp_tol: float, fn_tol: float):
    """Widest (t_low, t_high) whose empirical false-positive and
    false-negative rates stay within tolerance on the given scores.
    Returns thresholds with t_low <= t_high. A tolerance of zero
    disables that side outright (quantiles at zero still leave tail
    mass out of sample), parking the threshold where no score reaches."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    uniq = np.unique(s)
    neg = np.sort(s[~y])
    pos = np.sort(s[y])

    if fp_tol <= 0.0:
        t_high = 2.0
    elif len(neg) == 0:
        t_high = uniq[0]
    else:
        frac_ge = (len(neg) - np.searchsorted(neg, uniq, side="left")) / len(neg)
        ok = np.nonzero(frac_ge <= fp_tol)[0]
        t_high = uniq[ok[0]] if len(ok) else uniq[-1] + 1e-9

    if fn_tol <= 0.0:
        t_low = -1.0
    elif len(pos) == 0:
        t_low = uniq[-1]
    else:
        frac_le = np.searchsorted(pos, uniq, side="right") / len(pos)
        ok = np.nonzero(frac_le <= fn_tol)[0]
        t_low = uniq[ok[-1]] if len(ok) else uniq[0] - 1e-9

    if t_low > t_high:
        t_low = t_high
    return float(t_low), float(t_high)


def resolve(score: float, t_low: float, t_high: float) -> str:
    if score >= t_high:
        return "P"
    if score <= t_low:
        return "N"
    return "U"


@dataclass(frozen=True)
class ValSample:
    """One labeled measurement sample. label is what the cloud believes
    (landmark annotations may be corrupted; validated uploads are exact);
    the frame itself is what the operator actually looks at."""
    frame: FrameRecord
    label: float
    hardness: float


def signal_vector(samples, class_id: int, region: Rect,
                  mode: str = "presence") -> np.ndarray:
    """Clean region signals for a sample set. Depends only on the region,
    so when many candidates share one the caller can compute this once."""
    return np.array([region_signal(s.frame, class_id, region, mode)
                     for s in samples])


def batch_scores(state: OperatorState, samples, class_id: int, rng,
                 mode: str = "presence", signals=None,
                 replicates: int = 1) -> np.ndarray:
    """Score a sample set in one shot. replicates > 1 redraws the noise
    that many times per sample (cloud-side replay; cheap compared to
    collecting more labeled frames)."""
    if signals is None:
        signals = signal_vector(samples, class_id, state.spec.region, mode)
    if replicates > 1:
        signals = np.tile(signals, replicates)
    if state.sigma <= 0.0:
        return np.clip(signals, 0.0, 1.0)
    hard = np.fromiter((s.hardness for s in samples), float, len(samples))
    if replicates > 1:
        hard = np.tile(hard, replicates)
    noise = rng.standard_normal(len(signals))
    return np.clip(signals + hard * state.sigma * noise, 0.0, 1.0)


def measure_ranker(state: OperatorState, samples, class_id: int, rng,
                   mode: str = "presence", signals=None,
                   replicates: int = 1) -> float:
    scores = batch_scores(state, samples, class_id, rng, mode, signals,
                          replicates)
    labels = np.tile([s.label > 0 for s in samples], replicates)
    state.measured_auc = auc(scores, labels)
    return state.measured_auc


def measure_filter(state: OperatorState, samples, class_id: int, rng,
                   fp_tol: float, fn_tol: float, signals=None,
                   replicates: int = 1) -> float:
    scores = batch_scores(state, samples, class_id, rng, signals=signals,
                          replicates=replicates)
    labels = np.tile([s.label > 0 for s in samples], replicates)
    t_low, t_high = calibrate(scores, labels, fp_tol, fn_tol)
    state.t_low, state.t_high = t_low, t_high
    state.measured_gamma = float(np.mean((scores >= t_high) | (scores <= t_low)))
    return state.measured_gamma


# ----------------------------------------------------------------- family

def enumerate_family(regions, grid=None, limit: int = 40):
    """Deterministic family spread across the cost range: all grid
    architectures are paired with every region, sorted by cost, and
    `limit` members are taken at evenly spaced cost ranks."""
    grid = grid or DEFAULT_GRID
    if not regions:
        raise ValueError("need at least one region")
    specs = []
    for c in grid["conv_layers"]:
        for k in grid["kernel"]:
            for d in grid["dense"]:
                for i in grid["input_px"]:
                    for ri, r in enumerate(regions):
                        specs.append((ri, OperatorSpec(c, k, d, i, r)))
    specs.sort(key=lambda t: (flops(t[1]), t[1].conv_layers, t[1].kernel,
                              t[1].dense, t[1].input_px, t[0]))
    n = len(specs)
    if limit >= n:
        return [s for _, s in specs]
    if limit == 1:
        return [specs[0][1]]
    picks = []
    prev = -1
    for j in range(limit):
        idx = max(prev + 1, round(j * (n - 1) / (limit - 1)))
        picks.append(specs[idx][1])
        prev = idx
    return picks


def pareto_frontier(states):
    """States not weakly dominated on (fps_cam, measured_auc), sorted by
    descending fps_cam."""
    out = []
    best_auc = -math.inf
    best_fps = None
    for s in sorted(states, key=lambda s: (-s.fps_cam, -(s.measured_auc or 0.0))):
        a = s.measured_auc or 0.0
        if a > best_auc:
            out.append(s)
            best_auc = a
            best_fps = s.fps_cam
        elif a == best_auc and s.fps_cam == best_fps:
            out.append(s)
    return out
