"""Cloud-side decision logic: operator selection and upgrade rules for
each query type, quality monitors, the counting estimator, and the
post-processing that turns an event log into progress curves.

All decision functions are pure: state in, decision out. The simulation
kernel owns the clock and calls them at event boundaries.
"""

from __future__ import annotations

import bisect
import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Optional, Sequence

import numpy as np

from .operators import OperatorState
from .trace import Trace, ground_truth_stats, stable_uniform

RETRIEVAL = "retrieval"
TAGGING = "tagging"
MAXCOUNT = "maxcount"
AVGCOUNT = "avgcount"
MEDIANCOUNT = "mediancount"
QUERY_TYPES = (RETRIEVAL, TAGGING, MAXCOUNT, AVGCOUNT, MEDIANCOUNT)

# deterministic 70/30 split of every labeled frame pool: the 30% side is
# only ever used to measure operators, never to train them
SPLIT_SALT = 0x7051
VAL_FRACTION = 0.3


@dataclass(frozen=True)
class PolicyConfig:
    alpha: float = 0.5         # retrieval speed decay per upgrade
    k_decline: float = 5.0     # quality-decline trigger factor
    beta: float = 2.0          # tagging upgrade factor
    window_w: int = 50         # monitoring window, in validated frames
    coverage_p: float = 0.95   # knowledge crop coverage
    theta_rankdist: float = 0.5  # max-count ranking-distance trigger

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if self.k_decline <= 1.0:
            raise ValueError("k_decline must exceed 1")
        if self.beta <= 1.0:
            raise ValueError("beta must exceed 1")
        if self.window_w < 10:
            raise ValueError("window_w must be at least 10")
        if not 0.0 < self.coverage_p <= 1.0:
            raise ValueError("coverage_p must be in (0, 1]")
        if self.theta_rankdist <= 0.0:
            raise ValueError("theta_rankdist must be positive")


@dataclass(frozen=True)
class QuerySpec:
    qtype: str
    class_id: int
    span_s: tuple[float, float]            # [start, end) seconds
    fp_tol: float = 0.01
    fn_tol: float = 0.01
    levels: tuple[int, ...] = (30, 10, 5, 1)

    def __post_init__(self):
        if self.qtype not in QUERY_TYPES:
            raise ValueError(f"unknown query type {self.qtype!r}")
        if self.span_s[1] <= self.span_s[0]:
            raise ValueError("empty query span")
        for tol in (self.fp_tol, self.fn_tol):
            if not 0.0 < tol < 0.5:
                raise ValueError("tolerances must be in (0, 0.5)")
        if any(k < 1 for k in self.levels):
            raise ValueError("levels must be >= 1")
        if any(a <= b for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("levels must strictly decrease")

    def frame_span(self, trace: Trace) -> tuple[int, int]:
        if self.span_s[0] < 0 or self.span_s[1] > trace.duration_s + 1e-9:
            raise ValueError("query span outside the trace")
        idx = trace.span_indices(self.span_s)
        if len(idx) == 0:
            raise ValueError("query span holds no frames")
        return idx.start, idx.stop


@dataclass
class QueryProgress:
    metric: str
    times: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)

    def add(self, t: float, v: float) -> None:
        self.times.append(float(t))
        self.values.append(float(v))

    def final(self, default: float = 0.0) -> float:
        return self.values[-1] if self.values else default


@dataclass
class QueryResult:
    progress: QueryProgress
    answer: object


@dataclass(frozen=True)
class Decision:
    """One policy decision, as logged to the decision CSV."""
    time_s: float
    decision: str      # deploy | upgrade | fallback | stall | level
    operator_id: int
    f_value: float
    reason: str


# ------------------------------------------------------------ validation split

def is_validation_frame(frame_index: int) -> bool:
    return stable_uniform(SPLIT_SALT, frame_index) < VAL_FRACTION


def split_pool(frames: Iterable[int]) -> tuple[list[int], list[int]]:
    train, val = [], []
    for f in frames:
        (val if is_validation_frame(f) else train).append(f)
    return train, val


# --------------------------------------------------------- retrieval policies

def f_value(fps_cam: float, fps_net: float) -> float:
    return fps_cam / fps_net


def retrieval_select_initial(states: Sequence[OperatorState], r_pos: float,
                             fps_net: float) -> tuple[OperatorState, bool]:
    """Most accurate operator that is fast enough to beat plain upload:
    f_op * R_pos > 1, and never slower than the uplink. Falls back to the
    fastest operator (flagged) when nothing qualifies."""
    if not states:
        raise ValueError("no candidate operators")
    eligible = [s for s in states
                if f_value(s.fps_cam, fps_net) * r_pos > 1.0
                and s.fps_cam >= fps_net]
    if eligible:
        best = max(eligible, key=lambda s: (s.measured_auc, s.fps_cam, -s.op_id))
        return best, False
    return max(states, key=lambda s: (s.fps_cam, -s.op_id)), True


def retrieval_select_next(states: Sequence[OperatorState], f_current: float,
                          fps_net: float, alpha: float) -> Optional[OperatorState]:
    """Most accurate operator in the (alpha * f_current, f_current) speed
    window, f measured against the uplink rate at this instant. None when
    the window is empty (keep the current operator)."""
    eligible = [s for s in states
                if alpha * f_current < f_value(s.fps_cam, fps_net) < f_current
                and s.fps_cam >= fps_net]
    if not eligible:
        return None
    return max(eligible, key=lambda s: (s.measured_auc, s.fps_cam, -s.op_id))


class DeclineMonitor:
    """Watches oracle outcomes of the current operator's uploads; fires
    when the latest window's positive ratio drops k x below the first
    window after deployment. A zero first window is floored at 1/w (one
    positive is the smallest ratio the window can resolve)."""

    def __init__(self, window_w: int, k_decline: float):
        self.w = int(window_w)
        self.k = float(k_decline)
        self._outcomes: list[bool] = []
        self._initial: Optional[float] = None

    @property
    def n(self) -> int:
        return len(self._outcomes)

    @property
    def initial_ratio(self) -> Optional[float]:
        return self._initial

    def record(self, positive: bool) -> None:
        self._outcomes.append(bool(positive))
        if self._initial is None and len(self._outcomes) >= self.w:
            self._initial = sum(self._outcomes[:self.w]) / self.w

    def recent_ratio(self) -> Optional[float]:
        if len(self._outcomes) < self.w:
            return None
        return sum(self._outcomes[-self.w:]) / self.w

    def should_upgrade(self) -> bool:
        if self._initial is None:
            return False
        recent = self.recent_ratio()
        return recent < max(self._initial, 1.0 / self.w) / self.k


# ----------------------------------------------------------- tagging policies

def effective_rate(fps_op: float, gamma: float, fps_net: float) -> float:
    """Frames resolved per second: on-camera tagging plus the uplink."""
    return fps_op * gamma + fps_net


def tagging_select(states: Sequence[OperatorState],
                   fps_net: float) -> OperatorState:
    if not states:
        raise ValueError("no candidate operators")
    return max(states, key=lambda s: (
        effective_rate(s.fps_cam, s.measured_gamma, fps_net),
        s.fps_cam, -s.op_id))


def tagging_upgrade_due(current_rate: float, best_rate: float,
                        beta: float) -> bool:
    return best_rate >= beta * current_rate


# ---------------------------------------------------------- max-count policies

def displacement_distance(order_a: Sequence[int],
                          order_b: Sequence[int]) -> int:
    """Sum over items of |position in a - position in b|. Both orders
    must rank the same items."""
    pos_b = {f: i for i, f in enumerate(order_b)}
    if (len(order_a) != len(order_b) or len(pos_b) != len(order_b)
            or len(set(order_a)) != len(order_a)):
        raise ValueError("orders must be permutations of the same items")
    total = 0
    for i, f in enumerate(order_a):
        if f not in pos_b:
            raise ValueError("orders must be permutations of the same items")
        total += abs(i - pos_b[f])
    return total


@lru_cache(maxsize=None)
def expected_random_distance(w: int) -> float:
    """Expected displacement distance of a uniform random permutation
    against the identity: exact by enumeration for small w, closed form
    (w^2 - 1) / 3 beyond."""
    if w <= 1:
        return 0.0
    if w <= 8:
        total = sum(sum(abs(i - p) for i, p in enumerate(perm))
                    for perm in itertools.permutations(range(w)))
        return total / math.factorial(w)
    return (w * w - 1) / 3.0


def count_ranking(frames: Iterable[int], counts: dict[int, float]) -> list[int]:
    """Frames by count descending; ties to the earlier frame."""
    return sorted(frames, key=lambda f: (-counts[f], f))


def maxcount_quality(camera_order: Sequence[int], oracle_order: Sequence[int],
                     theta: float) -> tuple[float, bool]:
    """Ranking distance between what the camera sent first and what the
    oracle counts say it should have sent first; upgrade when the
    distance passes theta x the random-permutation expectation. Windows
    shorter than 3 never decide."""
    if len(camera_order) < 3:
        return 0.0, False
    d = float(displacement_distance(camera_order, oracle_order))
    return d, d > theta * expected_random_distance(len(camera_order))


def maxcount_r_eff(landmark_counts: Sequence[int]) -> float:
    """Stand-in for R_pos in the selection rule: fraction of landmarks
    whose count reaches the 0.9 quantile of positive landmark counts."""
    pos = [c for c in landmark_counts if c > 0]
    if not pos:
        return 0.0
    q = float(np.quantile(pos, 0.9))
    return sum(c >= q for c in landmark_counts) / len(landmark_counts)


# ----------------------------------------------------------------- counting

class CountingEstimator:
    """Running average / median over the union multiset of landmark
    counts and oracle counts of randomly sampled frames. Seeds may be
    keyed by frame so an exact observation of the same frame replaces
    the seed instead of double counting it.

    Both statistics are maintained incrementally (running sum plus a
    sorted copy); querying after every sample is O(n) per step, not
    O(n log n), which matters when a long span is sampled to exhaustion."""

    def __init__(self, landmark_counts: Iterable[int],
                 seed_frames: Optional[Iterable[int]] = None):
        counts = [int(c) for c in landmark_counts]
        if not counts:
            raise ValueError("need at least one landmark count")
        self._by_frame: dict[int, int] = {}
        if seed_frames is not None:
            frames = [int(f) for f in seed_frames]
            if len(frames) != len(counts):
                raise ValueError("seed_frames length mismatch")
            self._by_frame = dict(zip(frames, counts))
        self._n = len(counts)
        self._sum = sum(counts)
        self._sorted = sorted(counts)

    def add(self, count: int, frame: Optional[int] = None) -> None:
        count = int(count)
        old = None if frame is None else self._by_frame.pop(frame, None)
        if old is not None:
            del self._sorted[bisect.bisect_left(self._sorted, old)]
            self._sum -= old
            self._n -= 1
        bisect.insort(self._sorted, count)
        self._sum += count
        self._n += 1

    @property
    def n(self) -> int:
        return self._n

    def avg(self) -> float:
        return self._sum / self._n

    def median(self) -> float:
        s, n = self._sorted, self._n
        if n % 2:
            return float(s[n // 2])
        return (s[n // 2 - 1] + s[n // 2]) / 2.0


# ------------------------------------------------------------- materialization

def materialize(query: QuerySpec, events: Sequence, trace: Trace) -> QueryResult:
    """Fold an event log into a progress curve and the final answer.

    Reads result_emitted payloads: retrieval {frame}, tagging
    {frame, tag} plus pass_completed {level}, maxcount {frame, count},
    avg/median {estimate, n}.
    """
    emitted = [e for e in events if e.kind == "result_emitted"]
    if query.qtype == RETRIEVAL:
        total = len(ground_truth_stats(trace, query.class_id,
                                       query.span_s).positives)
        progress = QueryProgress("recall")
        frames = []
        for e in emitted:
            frames.append(int(e.payload["frame"]))
            progress.add(e.time_s, len(frames) / total if total else 1.0)
        return QueryResult(progress, sorted(frames))
    if query.qtype == TAGGING:
        progress = QueryProgress("completed_level")
        tags: dict[int, str] = {}
        for e in events:
            if e.kind == "pass_completed" and "level" in e.payload:
                progress.add(e.time_s, int(e.payload["level"]))
            elif e.kind == "result_emitted":
                tags[int(e.payload["frame"])] = e.payload["tag"]
        return QueryResult(progress, tags)
    if query.qtype == MAXCOUNT:
        progress = QueryProgress("running_max")
        best: Optional[tuple[int, int]] = None
        for e in emitted:
            c, f = int(e.payload["count"]), int(e.payload["frame"])
            if best is None or c > best[1]:
                best = (f, c)
            progress.add(e.time_s, best[1])
        answer = {"frame": best[0], "count": best[1]} if best else None
        return QueryResult(progress, answer)
    # avg / median
    progress = QueryProgress("estimate")
    for e in emitted:
        progress.add(e.time_s, float(e.payload["estimate"]))
    return QueryResult(progress, progress.final(math.nan))
