"""Deterministic discrete-event simulation of one query execution.

One simulation owns a virtual clock, an event heap, and three contended
resources: the camera compute (serial, one frame attempt at a time), the
uplink (serial byte channel), and the downlink (serial, ships operator
models).  Cloud compute is free except for explicit training timers.

The kernel schedules; a query executor decides.  After every event the
kernel offers idle resources back to the executor (pull model), so
upload priorities always reflect the queue state at the dequeue instant.
Everything, including instantaneous markers like result_emitted, goes
through the heap so the log comes out totally ordered by
(time, kind order, payload key, insertion seq).

Kind order: transfers first (frame 0, tag 1, model 2), then cloud
training 3, then camera compute 4, then results 5, pass milestones 6,
upgrade decisions 7.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .camera import (FIFO, PRIORITY, RankingPass, TagState, TaggingPass,
                     UploadQueue, random_sample_stream, ranking_order,
                     seed_queue, temporal_priority_order)
from .knowledge import build_knowledge, estimate_pos_ratio, sample_landmarks
from .operators import (BOOTSTRAP_MIN, CAMERA_PRESETS, CameraModel,
                        OperatorState, ValSample, enumerate_family,
                        make_state, measure_filter, measure_ranker, resolve,
                        score_frame, signal_vector)
from .policies import (AVGCOUNT, MAXCOUNT, MEDIANCOUNT, RETRIEVAL, TAGGING,
                       CountingEstimator, Decision, DeclineMonitor,
                       PolicyConfig, QueryResult, QuerySpec, effective_rate,
                       f_value, is_validation_frame, materialize,
                       maxcount_quality, maxcount_r_eff,
                       retrieval_select_initial, retrieval_select_next,
                       split_pool, tagging_select, tagging_upgrade_due)
from .trace import DifficultyProfile, Rect, Trace, frame_hardness

TAG_BYTES = 16  # one resolved frame tag on the wire

EVENT_ORDER = {
    "frame_upload_done": 0,
    "tag_upload_done": 1,
    "operator_shipped": 2,
    "operator_trained": 3,
    "frame_scored": 4,
    "result_emitted": 5,
    "pass_completed": 6,
    "upgrade_triggered": 7,
}

_MARKERS = ("result_emitted", "pass_completed", "upgrade_triggered")

# tagging gamma re-measurement: wait for this many validated uploads,
# then refresh candidate measurements every RE_MEASURE_EVERY uploads on
# the most recent LATE_POOL_CAP of them
LATE_POOL_MIN = 30
RE_MEASURE_EVERY = 25
LATE_POOL_CAP = 200

# measurement replays each candidate on the pool this many times; noise
# redraws are free on the cloud, labeled frames are not, and threshold
# quantiles need more draws than the landmark pool has rows
RANKER_REPLICATES = 8
FILTER_REPLICATES = 20


class VerifyError(AssertionError):
    """A runtime invariant check failed (only raised under verify)."""


@dataclass(frozen=True)
class NetworkModel:
    uplink_bytes_per_s: float = 1048576.0
    downlink_bytes_per_s: float = 2097152.0


@dataclass
class Event:
    time_s: float
    kind: str
    payload: dict


@dataclass
class SimConfig:
    trace: Trace
    query: QuerySpec
    camera: CameraModel = CAMERA_PRESETS["embedded-default"]
    network: NetworkModel = field(default_factory=NetworkModel)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    landmark_interval: int = 30
    landmark_drop_p: float = 0.0
    landmark_spurious_rate: float = 0.0
    seed: int = 0
    abort_time_s: Optional[float] = None
    operator_limit: int = 40
    operator_family: Optional[list] = None  # explicit specs, skips enumeration
    frozen_operator: bool = False           # never upgrade (ablation)
    bin_s: float = 3600.0
    difficulty: DifficultyProfile = field(default_factory=DifficultyProfile)
    verify: bool = False


@dataclass
class SimResult:
    events: list
    bytes_uplink: int
    bytes_downlink: int
    switches: list    # (time_s, op_id) per operator_shipped
    decisions: list   # policy Decision records
    result: QueryResult
    finished: bool    # ran to completion (not aborted)
    t_end: float
    seed: int


def _operator_query(qtype: str) -> bool:
    return qtype in (RETRIEVAL, TAGGING, MAXCOUNT)


def validate_config(cfg: SimConfig) -> None:
    tr = cfg.trace
    if tr.n_frames == 0:
        raise ValueError("trace has no frames")
    if cfg.network.uplink_bytes_per_s <= 0 or cfg.network.downlink_bytes_per_s <= 0:
        raise ValueError("network rates must be positive")
    if cfg.camera.compute_rate <= 0:
        raise ValueError("camera compute rate must be positive")
    if cfg.landmark_interval < 1:
        raise ValueError("landmark interval must be >= 1 frame")
    if not 0.0 <= cfg.landmark_drop_p <= 1.0:
        raise ValueError("landmark drop probability must be in [0, 1]")
    if cfg.landmark_spurious_rate < 0.0:
        raise ValueError("landmark spurious rate must be >= 0")
    if cfg.abort_time_s is not None and cfg.abort_time_s <= 0:
        raise ValueError("abort time must be positive")
    if cfg.operator_limit < 1:
        raise ValueError("operator limit must be >= 1")
    if cfg.bin_s <= 0:
        raise ValueError("bin_s must be positive")
    # the capture-time detector annotates one landmark per 1/detector_fps
    # seconds at best, so landmarks cannot come faster than that
    if cfg.landmark_interval / tr.fps < 1.0 / cfg.camera.detector_fps - 1e-9:
        raise ValueError(
            "landmark interval shorter than the capture-time detector budget "
            f"({cfg.landmark_interval / tr.fps:.1f} s < "
            f"{1.0 / cfg.camera.detector_fps:.1f} s)")
    span = cfg.query.frame_span(tr)
    marks = range(0, tr.n_frames, cfg.landmark_interval)
    if _operator_query(cfg.query.qtype):
        n_train = sum(not is_validation_frame(i) for i in marks)
        if n_train < BOOTSTRAP_MIN and cfg.operator_family is None:
            raise ValueError(
                f"{n_train} landmark training frames after the split, "
                f"need >= {BOOTSTRAP_MIN}; lower landmark_interval or use "
                "a longer trace")
    else:
        if not any(span[0] <= i < span[1] for i in marks):
            raise ValueError("counting queries need >= 1 landmark in the span")


def pad_region(r: Rect, resolution: tuple, frac: float = 0.10) -> Rect:
    """Grow a knowledge crop by frac per side, clamped to the frame.
    Crops hug the observed detections; padding keeps a positive landing
    just outside the hull visible."""
    dw, dh = round(r.w * frac), round(r.h * frac)
    x, y = max(0, r.x - dw), max(0, r.y - dh)
    w, h = resolution
    return Rect(x, y, min(w - x, r.w + 2 * dw), min(h - y, r.h + 2 * dh))


def candidate_specs(trace: Trace, knowledge, limit: int) -> list:
    """Enumerate the operator grid over the knowledge crops plus the full
    frame. Deterministic: ids assigned by enumeration order."""
    full = Rect(0, 0, *trace.resolution)
    regions = []
    for _, r in knowledge.crops:
        r = pad_region(r, trace.resolution)
        if r not in regions:
            regions.append(r)
    if full not in regions:
        regions.append(full)
    return enumerate_family(regions, limit=limit)


def derive_family(cfg: SimConfig) -> list:
    """The candidate list a run of this config will enumerate, with ids
    matching its deploy decisions, computed without simulating."""
    if cfg.operator_family is not None:
        return list(cfg.operator_family)
    rng = np.random.default_rng([cfg.seed, 0])
    lm = sample_landmarks(cfg.trace, cfg.landmark_interval,
                          cfg.landmark_drop_p, cfg.landmark_spurious_rate,
                          rng, spurious_classes=(cfg.query.class_id,))
    kn = build_knowledge(lm, cfg.query.class_id, cfg.trace.resolution,
                         cfg.trace.duration_s, cfg.bin_s)
    return candidate_specs(cfg.trace, kn, cfg.operator_limit)


# ------------------------------------------------------------------ kernel

class Kernel:
    """Clock, heap, channels, and log. Executors call emit/train/ship;
    the kernel pulls camera work and uploads from the executor whenever
    those resources go idle."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg
        self.net = cfg.network
        self.trace = cfg.trace
        self.fps_net = self.net.uplink_bytes_per_s / cfg.trace.full_bytes
        self.now = 0.0
        self.events: list[Event] = []
        self.decisions: list[Decision] = []
        self.switches: list[tuple[float, int]] = []
        self.bytes_uplink = 0
        self.bytes_downlink = 0
        self._heap: list = []
        self._seq = 0
        self._dl_free = 0.0
        self.uplink_busy = False
        self.camera_busy = False
        self.executor = None

    def _push(self, t: float, kind: str, payload: dict) -> None:
        self._seq += 1
        heapq.heappush(self._heap,
                       (t, EVENT_ORDER[kind], _pkey(payload), self._seq,
                        kind, payload))

    def emit(self, kind: str, payload: dict) -> None:
        """Log an instantaneous event at the current time."""
        self._push(self.now, kind, payload)

    def train(self, op_id: int, latency_s: float) -> None:
        # cloud compute is unconstrained: timers run in parallel
        self._push(self.now + latency_s, "operator_trained", {"op": op_id})

    def ship(self, op_id: int, nbytes: int) -> None:
        start = max(self.now, self._dl_free)
        done = start + nbytes / self.net.downlink_bytes_per_s
        self._dl_free = done
        self._push(done, "operator_shipped", {"op": op_id, "bytes": nbytes})

    def decide(self, decision: str, op_id: int, f: float, reason: str) -> None:
        self.decisions.append(Decision(self.now, decision, op_id, f, reason))

    def _fill(self) -> None:
        ex = self.executor
        if not self.camera_busy and not ex.finished:
            work = ex.next_camera_work()
            if work is not None:
                dt, kind, payload = work
                self._push(self.now + dt, kind, payload)
                self.camera_busy = True
        if not self.uplink_busy and not ex.finished:
            up = ex.next_upload()
            if up is not None:
                kind, payload = up
                dt = payload["bytes"] / self.net.uplink_bytes_per_s
                self._push(self.now + dt, kind, payload)
                self.uplink_busy = True


def _pkey(payload: dict) -> int:
    for k in ("frame", "op", "level"):
        if k in payload:
            return int(payload[k])
    return 0


def run(cfg: SimConfig, executor_factory: Optional[Callable] = None) -> SimResult:
    """Simulate one query to completion, abort time, or exhaustion."""
    validate_config(cfg)
    kernel = Kernel(cfg)
    factory = executor_factory or zc2_executor
    ex = factory(kernel, cfg)
    kernel.executor = ex
    ex.boot()
    kernel._fill()
    abort = cfg.abort_time_s if cfg.abort_time_s is not None else math.inf
    aborted = False
    while kernel._heap:
        t, _, _, _, kind, payload = heapq.heappop(kernel._heap)
        if t > abort:
            aborted = True
            break
        kernel.now = t
        kernel.events.append(Event(t, kind, payload))
        if kind in ("frame_upload_done", "tag_upload_done"):
            kernel.uplink_busy = False
            kernel.bytes_uplink += payload["bytes"]
        elif kind == "operator_shipped":
            kernel.bytes_downlink += payload["bytes"]
            kernel.switches.append((t, payload["op"]))
        elif kind == "frame_scored":
            kernel.camera_busy = False
        ex.handle(Event(t, kind, payload))
        if ex.finished:
            # keep same-instant consequence markers, drop cancelled work
            while kernel._heap and kernel._heap[0][0] == t:
                t2, _, _, _, k2, p2 = heapq.heappop(kernel._heap)
                if k2 in _MARKERS:
                    kernel.events.append(Event(t2, k2, p2))
            break
        kernel._fill()
    result = materialize(cfg.query, kernel.events, cfg.trace)
    res = SimResult(events=kernel.events,
                    bytes_uplink=kernel.bytes_uplink,
                    bytes_downlink=kernel.bytes_downlink,
                    switches=kernel.switches,
                    decisions=kernel.decisions,
                    result=result,
                    finished=ex.finished and not aborted,
                    t_end=kernel.events[-1].time_s if kernel.events else 0.0,
                    seed=cfg.seed)
    if cfg.verify:
        verify_log(res)
    return res


def replay_check(cfg: SimConfig, executor_factory: Optional[Callable] = None) -> bool:
    """Run twice with the same config; true iff the event logs match."""
    a = run(cfg, executor_factory)
    b = run(cfg, executor_factory)
    key = lambda r: [(e.time_s, e.kind, e.payload) for e in r.events]
    return key(a) == key(b)


def verify_log(res: SimResult) -> None:
    """Post-run invariant checks over the finished log."""
    last = (-math.inf, -1, -1)
    shipped: set[int] = set()
    uploaded: set[int] = set()
    up = down = 0
    for e in res.events:
        k = (e.time_s, EVENT_ORDER[e.kind], _pkey(e.payload))
        if k[0] < last[0]:
            raise VerifyError(f"time went backwards at {e}")
        last = k
        if e.kind == "operator_shipped":
            shipped.add(e.payload["op"])
            down += e.payload["bytes"]
        elif e.kind == "frame_upload_done":
            up += e.payload["bytes"]
            if "frame" in e.payload:
                f = e.payload["frame"]
                if f in uploaded:
                    raise VerifyError(f"frame {f} uploaded twice")
                uploaded.add(f)
        elif e.kind == "tag_upload_done":
            up += e.payload["bytes"]
        elif e.kind == "frame_scored":
            if e.payload["op"] not in shipped:
                raise VerifyError(
                    f"operator {e.payload['op']} used before shipping")
    if up != res.bytes_uplink or down != res.bytes_downlink:
        raise VerifyError(
            f"byte accounting off: log says {up}/{down}, "
            f"totals {res.bytes_uplink}/{res.bytes_downlink}")


def milestone_time(progress, target: float) -> Optional[float]:
    """First time the progress metric reaches target, None if never."""
    for t, v in zip(progress.times, progress.values):
        if v >= target - 1e-12:
            return t
    return None


# ------------------------------------------------------------- executors

class _ZC2Base:
    """Shared plumbing: landmark bootstrap, knowledge, candidate family,
    measurement, and the train/ship/deploy pipeline. Subclasses supply
    the per-query camera and cloud logic."""

    mode = "presence"

    def __init__(self, kernel: Kernel, cfg: SimConfig):
        self.k = kernel
        self.cfg = cfg
        self.trace = cfg.trace
        self.q = cfg.query
        self.cid = cfg.query.class_id
        self.span = cfg.query.frame_span(cfg.trace)
        self.span_size = self.span[1] - self.span[0]
        self.finished = False
        self.rng_corrupt = np.random.default_rng([cfg.seed, 0])
        self.rng_meas = np.random.default_rng([cfg.seed, 1])
        self.rng_cam = np.random.default_rng([cfg.seed, 2])
        self.rng_pass = np.random.default_rng([cfg.seed, 3])
        # landmarks exist from capture time; the query pays to upload them
        self.landmarks = sample_landmarks(
            cfg.trace, cfg.landmark_interval, cfg.landmark_drop_p,
            cfg.landmark_spurious_rate, self.rng_corrupt,
            spurious_classes=(self.cid,))
        self._boot_payload: Optional[dict] = None
        self.knowledge = None
        self.believed: dict[int, int] = {}
        self.states: list[OperatorState] = []
        self.by_id: dict[int, OperatorState] = {}
        self.val_samples: list[ValSample] = []
        self.current: Optional[OperatorState] = None
        self.pending: Optional[OperatorState] = None
        self.training: Optional[int] = None
        self.trained_ops: set[int] = set()
        self.uploaded: set[int] = set()
        self.n_uploads = 0
        self.tag_outbox: list[tuple[int, str]] = []
        self.tags_in_flight = False
        self.queue: Optional[UploadQueue] = None
        self.upload_scores: dict[int, float] = {}
        self.stalled = False
        self.pass_no = 0

    # ---- kernel interface

    def boot(self) -> None:
        n = len(self.landmarks)
        self._boot_payload = {"landmarks": n, "bytes": n * self.trace.thumb_bytes}

    def handle(self, ev: Event) -> None:
        kind = ev.kind
        if kind == "frame_upload_done":
            if "landmarks" in ev.payload:
                self._on_knowledge()
            else:
                self._on_upload(int(ev.payload["frame"]))
        elif kind == "tag_upload_done":
            self.tags_in_flight = False
            self._on_tags_delivered(ev.payload)
        elif kind == "operator_trained":
            op = ev.payload["op"]
            self.trained_ops.add(op)
            if self.training == op:
                st = self.by_id[op]
                self.k.ship(op, st.model_bytes)
        elif kind == "operator_shipped":
            self.pending = self.by_id[ev.payload["op"]]
        elif kind == "frame_scored":
            self._on_camera(ev.payload)

    def next_upload(self):
        if self._boot_payload is not None:
            p, self._boot_payload = self._boot_payload, None
            return "frame_upload_done", p
        if self.tag_outbox:
            batch, self.tag_outbox = self.tag_outbox, []
            self.tags_in_flight = True
            return "tag_upload_done", {
                "frames": [f for f, _ in batch],
                "tags": "".join(t for _, t in batch),
                "bytes": TAG_BYTES * len(batch)}
        return self._next_frame_upload()

    def next_camera_work(self):
        raise NotImplementedError

    # ---- bootstrap

    def _on_knowledge(self) -> None:
        lm = self.landmarks
        self.knowledge = build_knowledge(
            lm, self.cid, self.trace.resolution, self.trace.duration_s,
            self.cfg.bin_s)
        # what the cloud believes about each landmark frame; annotations
        # may be corrupted, the frames themselves are what operators see
        self.believed = {
            m.frame_index: sum(d.class_id == self.cid for d in m.detections)
            for m in lm}
        self.span_landmarks = [m for m in lm
                               if self.span[0] <= m.frame_index < self.span[1]]
        self.r_pos = estimate_pos_ratio(self.span_landmarks or lm, self.cid)
        self._after_knowledge()

    def _after_knowledge(self) -> None:
        raise NotImplementedError

    def _build_family(self) -> None:
        train, val = split_pool(self.believed)
        wrong = sum((self.believed[f] > 0) != (self.trace.frames[f].count(self.cid) > 0)
                    for f in train)
        noise = wrong / len(train) if train else 0.0
        if self.cfg.operator_family is not None:
            specs = list(self.cfg.operator_family)
        else:
            specs = candidate_specs(self.trace, self.knowledge,
                                    self.cfg.operator_limit)
        self.states = [make_state(sp, i, self.cfg.camera, len(train), noise)
                       for i, sp in enumerate(specs)]
        self.by_id = {st.op_id: st for st in self.states}
        self.val_samples = [
            ValSample(self.trace.frames[f], float(self.believed[f]),
                      frame_hardness(f, self.cfg.difficulty))
            for f in val]
        # a crop can structurally hide positives, and a handful of val
        # rows will not reliably show it; charge each region its believed
        # miss rate over every positive landmark, plus a rule-of-succession
        # margin for positives the landmarks never saw. The full frame
        # hides nothing and pays neither.
        pos = [m for m in self.landmarks
               if any(d.class_id == self.cid for d in m.detections)]
        margin = 1.0 / (len(pos) + 1)
        full = Rect(0, 0, *self.trace.resolution)
        self.region_miss: dict = {}
        for st in self.states:
            r = st.spec.region
            if r in self.region_miss:
                continue
            if r == full:
                self.region_miss[r] = 0.0
                continue
            missed = sum(
                not any(d.class_id == self.cid and r.contains(*d.center())
                        for d in m.detections)
                for m in pos)
            self.region_miss[r] = (missed / len(pos) if pos else 0.0) + margin

    def _measure_rankers(self, samples) -> None:
        cache: dict = {}
        for st in self.states:
            sig = cache.get(st.spec.region)
            if sig is None:
                sig = cache[st.spec.region] = signal_vector(
                    samples, self.cid, st.spec.region, self.mode)
            measure_ranker(st, samples, self.cid, self.rng_meas, self.mode,
                           signals=sig, replicates=RANKER_REPLICATES)

    def _measure_filters(self, samples) -> None:
        cache: dict = {}
        # camera tags are final but a frame can face a fresh attempt at
        # every level plus a restart, so each attempt gets a share of the
        # tolerance; a region that misses m of the believed positives
        # spends m of the false-negative budget before thresholds apply
        share = 1.0 / (len(self.q.levels) + 1)
        for st in self.states:
            r = st.spec.region
            sig = cache.get(r)
            if sig is None:
                sig = cache[r] = signal_vector(samples, self.cid, r)
            miss = self.region_miss.get(r, 0.0)
            fn_budget = max(0.0, (self.q.fn_tol - miss) * share)
            measure_filter(st, samples, self.cid, self.rng_meas,
                           self.q.fp_tol * share, fn_budget, signals=sig,
                           replicates=FILTER_REPLICATES)

    def _deploy(self, st: OperatorState, decision: str, reason: str) -> None:
        self.training = st.op_id
        self.k.decide(decision, st.op_id,
                      f_value(st.fps_cam, self.k.fps_net), reason)
        if st.op_id in self.trained_ops:
            self.k.ship(st.op_id, st.model_bytes)  # cached training
        else:
            self.k.train(st.op_id, st.train_latency_s)

    def _hardness(self, f: int) -> float:
        return frame_hardness(f, self.cfg.difficulty)

    # ---- subclass hooks

    def _on_upload(self, f: int) -> None:
        raise NotImplementedError

    def _on_camera(self, payload: dict) -> None:
        raise NotImplementedError

    def _on_tags_delivered(self, payload: dict) -> None:
        for f, t in zip(payload["frames"], payload["tags"]):
            self.k.emit("result_emitted",
                        {"frame": int(f), "tag": t, "source": "camera"})

    def _next_frame_upload(self):
        if self.queue is None:
            return None
        while True:
            item = self.queue.pop()
            if item is None:
                return None
            f, score = item
            if f in self.uploaded:
                continue  # went up under an earlier pass
            if self.cfg.verify and self.queue.mode == PRIORITY:
                snap = self.queue.snapshot()
                if snap and any(s > score + 1e-12 for _, s in snap):
                    raise VerifyError(f"priority dequeue below max at {f}")
            self.uploaded.add(f)
            self.upload_scores[f] = score
            return "frame_upload_done", {
                "frame": f, "bytes": self.trace.frames[f].full_bytes}


class _RankingExec(_ZC2Base):
    """Multipass ranking execution shared by retrieval and max-count:
    seed the priority queue in temporal-priority order, rescore with the
    current ranker, upload from the head, upgrade per policy."""

    def __init__(self, kernel, cfg):
        super().__init__(kernel, cfg)
        self.rpass: Optional[RankingPass] = None
        self.monitor: Optional[DeclineMonitor] = None

    def _after_knowledge(self) -> None:
        self._build_family()
        self._measure_rankers(self.val_samples)
        st, fallback = retrieval_select_initial(
            self.states, self._selection_ratio(), self.k.fps_net)
        if fallback:
            self._deploy(st, "fallback", "no operator clears the upload rate")
        else:
            self._deploy(st, "deploy", "initial selection")

    def _selection_ratio(self) -> float:
        return self.r_pos

    def next_camera_work(self):
        if self.pending is not None:
            self._apply_pending()
        if self.rpass is None:
            return None
        f = self.rpass.next_frame()
        if f is None:
            self.rpass = None
            self.k.emit("pass_completed",
                        {"op": self.current.op_id, "pass": self.pass_no})
            if self.training is None and not self.stalled:
                self._upgrade("operator finished all frames")
            return None
        s = score_frame(self.current, self.trace.frames[f], self.cid,
                        self.rng_cam, self._hardness(f), self.mode)
        return (1.0 / self.current.fps_cam, "frame_scored",
                {"frame": f, "score": s, "op": self.current.op_id})

    def _apply_pending(self) -> None:
        st, self.pending = self.pending, None
        self.training = None
        self.stalled = False
        self.pass_no += 1
        first = self.current is None
        self.current = st
        self.monitor = DeclineMonitor(self.cfg.policy.window_w,
                                      self.cfg.policy.k_decline)
        if first:
            self.queue = UploadQueue(PRIORITY)
            order = temporal_priority_order(
                self.span, self.trace.fps,
                self.knowledge.density.ranked_bins(), self.cfg.bin_s)
            seed_queue(self.queue, order)
        else:
            order = ranking_order(self.queue)
        self.rpass = RankingPass(order, self.queue)

    def _on_camera(self, payload: dict) -> None:
        if self.rpass is not None:
            self.rpass.on_scored(int(payload["frame"]), float(payload["score"]))

    def _upgrade(self, reason: str) -> None:
        if self.cfg.frozen_operator:
            return
        cur_f = f_value(self.current.fps_cam, self.k.fps_net)
        nxt = retrieval_select_next(self.states, cur_f, self.k.fps_net,
                                    self.cfg.policy.alpha)
        if nxt is None:
            self.k.decide("stall", self.current.op_id, cur_f,
                          "no eligible slower operator")
            self.stalled = True
            return
        self.k.emit("upgrade_triggered", {"op": nxt.op_id, "reason": reason})
        self._deploy(nxt, "upgrade", reason)


class _RetrievalExec(_RankingExec):
    def __init__(self, kernel, cfg):
        super().__init__(kernel, cfg)
        self.found = 0

    def _on_upload(self, f: int) -> None:
        self.n_uploads += 1
        pos = self.trace.frames[f].count(self.cid) > 0
        if pos:
            self.found += 1
            self.k.emit("result_emitted", {"frame": f})
        if self.n_uploads == self.span_size:
            self.finished = True
            return
        if self.monitor is not None:
            self.monitor.record(pos)
            if (self.monitor.should_upgrade() and self.training is None
                    and not self.stalled):
                self._upgrade("quality decline")


class _MaxCountExec(_RankingExec):
    mode = "count"

    def __init__(self, kernel, cfg):
        super().__init__(kernel, cfg)
        self.window: deque = deque(maxlen=cfg.policy.window_w)

    def _selection_ratio(self) -> float:
        counts = [self.believed[m.frame_index]
                  for m in (self.span_landmarks or self.landmarks)]
        return maxcount_r_eff(counts)

    def _apply_pending(self) -> None:
        super()._apply_pending()
        self.window.clear()

    def _on_upload(self, f: int) -> None:
        self.n_uploads += 1
        count = self.trace.frames[f].count(self.cid)
        self.k.emit("result_emitted", {"frame": f, "count": count})
        if self.n_uploads == self.span_size:
            self.finished = True
            return
        self.window.append(f)
        if len(self.window) == self.window.maxlen and self.training is None \
                and not self.stalled:
            frames = list(self.window)
            cam = sorted(frames, key=lambda x: (-self.upload_scores[x], x))
            oracle = sorted(frames, key=lambda x:
                            (-self.trace.frames[x].count(self.cid), x))
            d, fire = maxcount_quality(cam, oracle,
                                       self.cfg.policy.theta_rankdist)
            if fire:
                self._upgrade(f"ranking distance {d:.0f}")


class _TaggingExec(_ZC2Base):
    """Multipass filtering: per-level rapid attempting plus work
    stealing, undecidables uploaded for cloud tags, upgrades restart the
    current level with undecided marks cleared."""

    def __init__(self, kernel, cfg):
        super().__init__(kernel, cfg)
        self.tags: Optional[TagState] = None
        self.tpass: Optional[TaggingPass] = None
        self.level_i = 0
        self.pass_serial = 0
        self.cam_t = (0.0, 1.0)
        self.upload_pool: list[int] = []
        self.exhaust_flagged = False
        self.flushing = False

    def _after_knowledge(self) -> None:
        self._build_family()
        self._measure_filters(self.val_samples)
        st = tagging_select(self.states, self.k.fps_net)
        self._deploy(st, "deploy", "initial selection")

    def next_camera_work(self):
        if self.pending is not None:
            self._apply_pending()
        if self.tpass is None or self.finished:
            return None
        f = self.tpass.next_frame()
        if f is None:
            if not self.exhaust_flagged:
                self.exhaust_flagged = True
                if self.training is None:
                    self._tag_upgrade(exhausted=True)
            return None
        s = score_frame(self.current, self.trace.frames[f], self.cid,
                        self.rng_cam, self._hardness(f))
        tag = resolve(s, *self.cam_t)
        payload = {"frame": f, "tag": tag, "op": self.current.op_id,
                   "level": self.q.levels[self.level_i],
                   "pass": self.pass_serial}
        if self.tpass.steal_target is not None:
            # a P/N here drops that queued upload; the log must show why
            payload["steal_from"] = self.tpass.steal_target
        return (1.0 / self.current.fps_cam, "frame_scored", payload)

    def _apply_pending(self) -> None:
        st, self.pending = self.pending, None
        self.training = None
        self.current = st
        # thresholds ride along with the model; later recalibrations on
        # the cloud never reach the camera without another ship
        self.cam_t = (st.t_low, st.t_high)
        if self.tags is None:
            self.tags = TagState(*self.span)
            self._start_level(0)
        else:
            self.tags.clear_undecided()
            self._start_level(self.level_i)

    def _start_level(self, i: int) -> None:
        self.level_i = i
        self.pass_serial += 1
        self.pass_no += 1
        self.exhaust_flagged = False
        self.queue = UploadQueue(FIFO)
        self.tpass = TaggingPass(self.q.levels[i], self.span, self.tags,
                                 self.queue, self.rng_pass)
        if self.tpass.coverage_complete():
            self._complete_level()

    def _complete_level(self) -> None:
        self.k.emit("pass_completed", {"level": self.q.levels[self.level_i]})
        self.queue = UploadQueue(FIFO)  # cancel pending uploads, keep tags
        self.tpass = None
        if self.level_i + 1 == len(self.q.levels):
            self.flushing = True
            self._maybe_finish()
        else:
            self._start_level(self.level_i + 1)

    def _maybe_finish(self) -> None:
        if self.flushing and not self.tag_outbox and not self.tags_in_flight:
            self.finished = True

    def _on_camera(self, p: dict) -> None:
        f, tag = int(p["frame"]), p["tag"]
        if self.tpass is not None and p["pass"] == self.pass_serial:
            self.tpass.on_tagged(f, tag)
            if tag in ("P", "N"):
                self.tag_outbox.append((f, tag))
                if self.tpass.coverage_complete():
                    self._complete_level()
            return
        # the pass that issued this attempt ended while it was in flight;
        # a resolved tag is still a result worth keeping
        if not self.tags.is_resolved(f):
            self.tags.set(f, tag, source="camera")
            if tag in ("P", "N"):
                self.tag_outbox.append((f, tag))
                if self.tpass is not None:
                    self.tpass.note_resolved(f)
                    if self.tpass.coverage_complete():
                        self._complete_level()

    def _on_tags_delivered(self, payload: dict) -> None:
        super()._on_tags_delivered(payload)
        self._maybe_finish()

    def _on_upload(self, f: int) -> None:
        self.n_uploads += 1
        self.upload_pool.append(f)
        if not self.tags.is_resolved(f):
            tag = "P" if self.trace.frames[f].count(self.cid) > 0 else "N"
            self.tags.set(f, tag, source="cloud")
            self.k.emit("result_emitted",
                        {"frame": f, "tag": tag, "source": "cloud"})
            if self.tpass is not None:
                self.tpass.note_resolved(f)
                if self.tpass.coverage_complete():
                    self._complete_level()
        if (not self.finished and not self.flushing
                and self.training is None
                and len(self.upload_pool) >= LATE_POOL_MIN
                and len(self.upload_pool) % RE_MEASURE_EVERY == 0):
            # once the pass ran dry the camera sits idle while these
            # uploads drain, so keep applying the exhaustion rule
            self._tag_upgrade(exhausted=self.exhaust_flagged)

    def _tag_upgrade(self, exhausted: bool) -> None:
        if self.cfg.frozen_operator:
            return
        if len(self.upload_pool) >= LATE_POOL_MIN:
            # the uploads are the frames the camera could not resolve:
            # re-measuring on them prices every candidate on the hard tail
            pool = self.upload_pool[-LATE_POOL_CAP:]
            samples = [ValSample(self.trace.frames[f],
                                 float(self.trace.frames[f].count(self.cid)),
                                 self._hardness(f))
                       for f in pool]
            self._measure_filters(samples)
        cur_rate = effective_rate(self.current.fps_cam,
                                  self.current.measured_gamma, self.k.fps_net)
        best = tagging_select(self.states, self.k.fps_net)
        if best.op_id == self.current.op_id:
            return
        best_rate = effective_rate(best.fps_cam, best.measured_gamma,
                                   self.k.fps_net)
        due = tagging_upgrade_due(cur_rate, best_rate, self.cfg.policy.beta)
        if exhausted:
            due = due or best_rate > cur_rate
        if due:
            reason = ("camera work exhausted" if exhausted
                      else "effective rate")
            self.k.emit("upgrade_triggered", {"op": best.op_id,
                                              "reason": reason})
            self._deploy(best, "upgrade", reason)


class _SamplingExec(_ZC2Base):
    """Average / median counting: no operator at all. Landmarks seed the
    estimator, then uniformly sampled frames refine it."""

    def __init__(self, kernel, cfg):
        super().__init__(kernel, cfg)
        self.estimator: Optional[CountingEstimator] = None
        self.stream = None
        self.stat = "avg" if cfg.query.qtype == AVGCOUNT else "median"

    def _after_knowledge(self) -> None:
        counts = [self.believed[m.frame_index] for m in self.span_landmarks]
        self.estimator = CountingEstimator(
            counts, seed_frames=[m.frame_index for m in self.span_landmarks])
        self.k.emit("result_emitted",
                    {"estimate": getattr(self.estimator, self.stat)(), "n": 0})
        self.stream = random_sample_stream(self.span, self.rng_cam)

    def next_camera_work(self):
        return None

    def _next_frame_upload(self):
        if self.stream is None:
            return None
        for f in self.stream:
            self.uploaded.add(f)
            return "frame_upload_done", {
                "frame": f, "bytes": self.trace.frames[f].full_bytes}
        return None

    def _on_upload(self, f: int) -> None:
        self.n_uploads += 1
        self.estimator.add(self.trace.frames[f].count(self.cid), frame=f)
        self.k.emit("result_emitted",
                    {"estimate": getattr(self.estimator, self.stat)(),
                     "n": self.estimator.n})
        if self.n_uploads == self.span_size:
            self.finished = True

    def _on_camera(self, payload: dict) -> None:
        pass


def zc2_executor(kernel: Kernel, cfg: SimConfig):
    qt = cfg.query.qtype
    if qt == RETRIEVAL:
        return _RetrievalExec(kernel, cfg)
    if qt == TAGGING:
        return _TaggingExec(kernel, cfg)
    if qt == MAXCOUNT:
        return _MaxCountExec(kernel, cfg)
    if qt in (AVGCOUNT, MEDIANCOUNT):
        return _SamplingExec(kernel, cfg)
    raise ValueError(f"unknown query type {qt!r}")
