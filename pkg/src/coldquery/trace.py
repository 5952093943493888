"""Ground-truth frame traces: synthesis, file I/O, exhaustive statistics.

A trace is a dense sequence of frame records for a fixed-rate camera.
Each record lists the object detections visible in that frame; frames
with no detections carry an empty tuple.  Traces are either synthesized
from a generative model (hotspot mixture in space, piecewise profile in
time) or loaded from a small text format.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

_MASK64 = (1 << 64) - 1


def _mix64(x: int) -> int:
    # splitmix64 finalizer; stable across platforms and runs
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK64
    x ^= x >> 31
    return x


def stable_uniform(salt: int, index: int) -> float:
    """Deterministic hash of (salt, index) to [0, 1). Independent of
    interpreter hash randomization, so splits and hardness assignments
    replay exactly."""
    return _mix64(_mix64(salt) ^ index) / 2.0**64


@dataclass(frozen=True)
class Rect:
    """Axis-aligned pixel rectangle. (x, y) is the top-left corner;
    w and h are inclusive pixel extents, so a single pixel is w = h = 1."""

    x: int
    y: int
    w: int
    h: int

    def contains(self, px, py) -> bool:
        return self.x <= px <= self.x + self.w - 1 and self.y <= py <= self.y + self.h - 1

    @property
    def area(self) -> int:
        return self.w * self.h


@dataclass(frozen=True)
class Detection:
    class_id: int
    x: int
    y: int
    w: int
    h: int

    def center(self):
        return (self.x + self.w // 2, self.y + self.h // 2)


@dataclass(slots=True)
class FrameRecord:
    index: int
    timestamp_s: float
    detections: tuple
    full_bytes: int
    thumb_bytes: int

    def count(self, class_id: int, region: Rect | None = None) -> int:
        n = 0
        for d in self.detections:
            if d.class_id != class_id:
                continue
            if region is not None and not region.contains(*d.center()):
                continue
            n += 1
        return n


@dataclass
class Trace:
    trace_id: str
    fps: float
    duration_s: float
    resolution: tuple
    frames: list

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def full_bytes(self) -> int:
        return self.frames[0].full_bytes if self.frames else 0

    @property
    def thumb_bytes(self) -> int:
        return self.frames[0].thumb_bytes if self.frames else 0

    def span_indices(self, span_s=None) -> range:
        """Frame indices whose timestamps fall in [start_s, end_s)."""
        if span_s is None:
            return range(self.n_frames)
        start_s, end_s = span_s
        lo = max(0, math.ceil(start_s * self.fps - 1e-9))
        hi = min(self.n_frames, math.ceil(end_s * self.fps - 1e-9))
        return range(lo, max(lo, hi))


@dataclass(frozen=True)
class Hotspot:
    """Spatial cluster of object activity. Centers are drawn uniformly in
    rect then jittered with N(0, jitter_px). active_s limits the hotspot
    to a time window; None means always active."""

    rect: Rect
    weight: float = 1.0
    jitter_px: float = 30.0
    active_s: tuple | None = None


@dataclass(frozen=True)
class ClassProfile:
    class_id: int
    occurrence_rate: float = 0.2
    hotspots: tuple = ()
    # ("geometric", mean>=1) or ("poisson1", lam): 1 + Poisson(lam)
    count_dist: tuple = ("geometric", 1.5)
    bbox_px: tuple = (48, 36)


@dataclass(frozen=True)
class DifficultyProfile:
    """Per-frame hardness assignment. Hardness scales operator score noise;
    a fixed fraction of frames is hard, the rest sit at the base level.
    Assignment is by stable hash of the frame index so any consumer can
    recompute it for a loaded trace."""

    hard_fraction: float = 0.3
    base_hardness: float = 0.25
    hard_hardness: float = 1.0
    salt: int = 0x5EED


def frame_hardness(index: int, profile: DifficultyProfile) -> float:
    if stable_uniform(profile.salt, index) < profile.hard_fraction:
        return profile.hard_hardness
    return profile.base_hardness


@dataclass(frozen=True)
class SynthParams:
    trace_id: str = "synth"
    fps: float = 1.0
    duration_s: float = 3600.0
    resolution: tuple = (1280, 720)
    classes: tuple = ()
    # multipliers over equal time bins spanning the duration
    temporal_profile: tuple = (1.0,)
    difficulty: DifficultyProfile = DifficultyProfile()
    full_bytes: int = 60000
    thumb_bytes: int = 6000
    seed: int = 0


def default_synth_params(**kw) -> SynthParams:
    """One-class street-scene style default: two hotspots, day/night profile."""
    w, h = kw.pop("resolution", (1280, 720))
    classes = (
        ClassProfile(
            class_id=0,
            occurrence_rate=kw.pop("occurrence_rate", 0.2),
            hotspots=(
                Hotspot(Rect(int(0.15 * w), int(0.50 * h), int(0.14 * w), int(0.13 * h)), 0.6, 16.0),
                Hotspot(Rect(int(0.62 * w), int(0.33 * h), int(0.10 * w), int(0.10 * h)), 0.4, 13.0),
            ),
            count_dist=kw.pop("count_dist", ("geometric", 1.5)),
        ),
    )
    return SynthParams(resolution=(w, h), classes=classes,
                       temporal_profile=kw.pop("temporal_profile", (1.0, 0.55, 1.45, 0.8)),
                       **kw)


def _profile_multiplier(times, duration_s, profile):
    profile = np.asarray(profile, dtype=float)
    nbins = len(profile)
    bins = np.minimum((times / duration_s * nbins).astype(int), nbins - 1)
    return profile[bins]


def _sample_counts(rng, dist, n):
    kind, p0 = dist
    if n == 0:
        return np.zeros(0, dtype=int)
    if kind == "geometric":
        if p0 < 1.0:
            raise ValueError("geometric count mean must be >= 1")
        return rng.geometric(1.0 / p0, size=n)
    if kind == "poisson1":
        return 1 + rng.poisson(p0, size=n)
    raise ValueError(f"unknown count distribution {kind!r}")


def generate_trace(params: SynthParams) -> Trace:
    """Synthesize a dense trace. Same params (including seed) give an
    identical trace, byte for byte after save."""
    rng = np.random.default_rng(params.seed)
    n = int(round(params.fps * params.duration_s))
    res_w, res_h = params.resolution
    times = np.arange(n) / params.fps
    per_frame = [None] * n  # lazily created lists, most frames stay empty

    for cls in params.classes:
        rate = np.clip(cls.occurrence_rate
                       * _profile_multiplier(times, params.duration_s, params.temporal_profile),
                       0.0, 1.0)
        pos_idx = np.nonzero(rng.random(n) < rate)[0]
        counts = _sample_counts(rng, cls.count_dist, len(pos_idx))
        det_frames = np.repeat(pos_idx, counts)
        m = len(det_frames)
        if m == 0:
            continue
        hot = list(cls.hotspots) or [Hotspot(Rect(0, 0, res_w, res_h), 1.0, 0.0)]
        det_t = det_frames / params.fps
        wmat = np.zeros((m, len(hot)))
        for j, hs in enumerate(hot):
            if hs.active_s is None:
                wmat[:, j] = hs.weight
            else:
                a, b = hs.active_s
                wmat[:, j] = np.where((det_t >= a) & (det_t < b), hs.weight, 0.0)
        rowsum = wmat.sum(axis=1)
        # frames where every hotspot is dormant fall back to uniform choice
        dead = rowsum <= 0
        if dead.any():
            wmat[dead] = 1.0
            rowsum[dead] = len(hot)
        cdf = np.cumsum(wmat / rowsum[:, None], axis=1)
        pick = (rng.random(m)[:, None] < cdf).argmax(axis=1)

        bw, bh = cls.bbox_px
        cx = np.empty(m)
        cy = np.empty(m)
        for j, hs in enumerate(hot):
            sel = pick == j
            k = int(sel.sum())
            if k == 0:
                continue
            ux = hs.rect.x + rng.random(k) * hs.rect.w
            uy = hs.rect.y + rng.random(k) * hs.rect.h
            cx[sel] = ux + rng.normal(0.0, hs.jitter_px, size=k)
            cy[sel] = uy + rng.normal(0.0, hs.jitter_px, size=k)
        x = np.clip(np.rint(cx - bw / 2), 0, res_w - bw).astype(int)
        y = np.clip(np.rint(cy - bh / 2), 0, res_h - bh).astype(int)
        for i in range(m):
            fi = int(det_frames[i])
            if per_frame[fi] is None:
                per_frame[fi] = []
            per_frame[fi].append(Detection(cls.class_id, int(x[i]), int(y[i]), bw, bh))

    frames = []
    for i in range(n):
        dets = tuple(per_frame[i]) if per_frame[i] else ()
        frames.append(FrameRecord(i, times[i], dets, params.full_bytes, params.thumb_bytes))
    return Trace(params.trace_id, params.fps, params.duration_s, (res_w, res_h), frames)


def save_trace(trace: Trace, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"#trace id={trace.trace_id} fps={trace.fps:g} dur={trace.duration_s:g} "
                f"w={trace.resolution[0]} h={trace.resolution[1]} "
                f"full={trace.full_bytes} thumb={trace.thumb_bytes}\n")
        for fr in trace.frames:
            for d in fr.detections:
                f.write(f"{fr.index},{d.class_id},{d.x},{d.y},{d.w},{d.h}\n")


def load_trace(path) -> Trace:
    """Parse the trace text format. Frames absent from the body are
    materialized with no detections; rows must be sorted by frame index."""
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if not header.startswith("#trace "):
            raise ValueError(f"{path}: missing #trace header")
        kv = {}
        for tok in header[len("#trace "):].split():
            if "=" not in tok:
                raise ValueError(f"{path}: bad header token {tok!r}")
            k, v = tok.split("=", 1)
            kv[k] = v
        try:
            fps = float(kv["fps"])
            dur = float(kv["dur"])
            res = (int(kv["w"]), int(kv["h"]))
            full_b = int(kv["full"])
            thumb_b = int(kv["thumb"])
            trace_id = kv["id"]
        except KeyError as e:
            raise ValueError(f"{path}: header missing field {e}") from None

        n = int(round(fps * dur))
        dets = [None] * n
        last = -1
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            try:
                fi, cid, x, y, w, h = (int(p) for p in parts)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-integer field") from None
            if fi < last:
                raise ValueError(f"{path}:{lineno}: rows not sorted by frame_index")
            if not (0 <= fi < n):
                raise ValueError(f"{path}:{lineno}: frame_index {fi} outside [0, {n})")
            last = fi
            if dets[fi] is None:
                dets[fi] = []
            dets[fi].append(Detection(cid, x, y, w, h))

    frames = [FrameRecord(i, i / fps, tuple(dets[i]) if dets[i] else (), full_b, thumb_b)
              for i in range(n)]
    return Trace(trace_id, fps, dur, res, frames)


@dataclass
class GroundTruthStats:
    """Exhaustive per-frame counts over a span. This is the oracle every
    estimate and every camera-side shortcut is judged against."""

    class_id: int
    indices: range
    counts: np.ndarray

    @property
    def positives(self):
        base = self.indices.start
        return [base + i for i in np.nonzero(self.counts > 0)[0]]

    @property
    def avg(self) -> float:
        return float(self.counts.mean()) if len(self.counts) else 0.0

    @property
    def median(self) -> float:
        return float(np.median(self.counts)) if len(self.counts) else 0.0

    @property
    def maximum(self) -> int:
        return int(self.counts.max()) if len(self.counts) else 0


def ground_truth_stats(trace: Trace, class_id: int, span_s=None,
                       region: Rect | None = None) -> GroundTruthStats:
    idx = trace.span_indices(span_s)
    counts = np.zeros(len(idx), dtype=int)
    for k, i in enumerate(idx):
        counts[k] = trace.frames[i].count(class_id, region)
    return GroundTruthStats(class_id, idx, counts)
