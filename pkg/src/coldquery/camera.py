"""Camera-side execution: upload queue, multipass ranking, the two-stage
tagging pass, and the random sampling stream used for counting.

Everything here is bookkeeping over frame indices. The simulation kernel
owns time, scoring and transfers; it drives the pass engines one frame
at a time (next_frame / on_tagged). The synchronous drivers at the
bottom run a whole pass in one call with a pluggable scorer, which is
what the unit tests exercise.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

PRIORITY = "priority"
FIFO = "fifo"

# frame order sources for a pass
TEMPORAL = "temporal"
RANKED = "ranked"
UNTAGGED_GROUPS = "untagged-groups"

_UNTAG, _POS, _NEG, _UND = 0, 1, 2, 3
_CODE = {"P": _POS, "N": _NEG, "U": _UND}
_NAME = {_POS: "P", _NEG: "N", _UND: "U"}


class UploadQueue:
    """Single upload queue for one query.

    priority mode dequeues the highest score (ties go to the earliest
    insertion); fifo mode dequeues in insertion order. Removal is lazy.
    A frame that was ever dequeued never comes back: push() on it is a
    silent no-op, so an upload can happen at most once per queue.
    """

    def __init__(self, mode: str = PRIORITY):
        if mode not in (PRIORITY, FIFO):
            raise ValueError(f"unknown queue mode {mode!r}")
        self.mode = mode
        self._entry: dict[int, tuple[float, int]] = {}  # frame -> (score, seq), insertion ordered
        self._heap: list[tuple[float, int, int]] = []    # (-score, seq, frame)
        self._seq = 0
        self._consumed: set[int] = set()

    def __len__(self) -> int:
        return len(self._entry)

    def __contains__(self, frame: int) -> bool:
        return frame in self._entry

    def score_of(self, frame: int) -> float:
        return self._entry[frame][0]

    def push(self, frame: int, score: float = 0.5) -> bool:
        """Insert, or reprioritize an already-queued frame. Returns False
        for frames already dequeued."""
        if frame in self._consumed:
            return False
        if self.mode == FIFO and frame in self._entry:
            return True  # keeps its original position
        self._seq += 1
        self._entry[frame] = (score, self._seq)
        if self.mode == PRIORITY:
            heapq.heappush(self._heap, (-score, self._seq, frame))
        return True

    def remove(self, frame: int) -> bool:
        return self._entry.pop(frame, None) is not None

    def pop(self) -> Optional[tuple[int, float]]:
        if self.mode == FIFO:
            if not self._entry:
                return None
            frame = next(iter(self._entry))
            score, _ = self._entry.pop(frame)
            self._consumed.add(frame)
            return frame, score
        while self._heap:
            neg, seq, frame = heapq.heappop(self._heap)
            if self._entry.get(frame) != (-neg, seq):
                continue  # removed, or stale priority
            del self._entry[frame]
            self._consumed.add(frame)
            return frame, -neg
        return None

    def tail(self) -> Optional[int]:
        """Most recently inserted live frame (the steal end)."""
        if not self._entry:
            return None
        return next(reversed(self._entry))

    def iter_from_tail(self) -> Iterator[int]:
        """Live frames, most recent insertion first."""
        return reversed(self._entry)

    def snapshot(self) -> list[tuple[int, float]]:
        """Live entries in dequeue order, without consuming anything."""
        if self.mode == FIFO:
            return [(f, sc) for f, (sc, _) in self._entry.items()]
        out = []
        for neg, seq, frame in sorted(self._heap):
            if self._entry.get(frame) == (-neg, seq):
                out.append((frame, -neg))
        return out


class TagState:
    """Per-frame tags over one contiguous query span.

    P and N are final for the life of the query; U can be upgraded to
    P/N by a later attempt or a cloud tag, and is cleared wholesale when
    an operator upgrade restarts the level.
    """

    def __init__(self, start: int, stop: int):
        if stop <= start:
            raise ValueError("empty span")
        self.start, self.stop = int(start), int(stop)
        self._tag = np.zeros(self.stop - self.start, dtype=np.int8)
        self._cloud = np.zeros(self.stop - self.start, dtype=bool)

    def __len__(self) -> int:
        return self.stop - self.start

    def _i(self, frame: int) -> int:
        if not self.start <= frame < self.stop:
            raise IndexError(f"frame {frame} outside span [{self.start}, {self.stop})")
        return frame - self.start

    def get(self, frame: int) -> Optional[str]:
        return _NAME.get(int(self._tag[self._i(frame)]))

    def source(self, frame: int) -> Optional[str]:
        i = self._i(frame)
        if self._tag[i] == _UNTAG:
            return None
        return "cloud" if self._cloud[i] else "camera"

    def set(self, frame: int, tag: str, source: str = "camera") -> None:
        i = self._i(frame)
        code = _CODE[tag]
        cur = int(self._tag[i])
        if cur in (_POS, _NEG):
            if code != cur:
                raise ValueError(f"frame {frame} already resolved as {_NAME[cur]}")
            return  # idempotent
        self._tag[i] = code
        self._cloud[i] = source == "cloud"

    def is_resolved(self, frame: int) -> bool:
        return int(self._tag[self._i(frame)]) in (_POS, _NEG)

    def clear_undecided(self) -> None:
        und = self._tag == _UND
        self._tag[und] = _UNTAG
        self._cloud[und] = False

    def resolved_in(self, lo: int, hi: int) -> bool:
        seg = self._tag[lo - self.start:hi - self.start]
        return bool(np.any((seg == _POS) | (seg == _NEG)))

    def undecided_in(self, lo: int, hi: int) -> list[int]:
        seg = self._tag[lo - self.start:hi - self.start]
        return [int(i) + lo for i in np.flatnonzero(seg == _UND)]

    def untagged_in(self, lo: int, hi: int) -> list[int]:
        seg = self._tag[lo - self.start:hi - self.start]
        return [int(i) + lo for i in np.flatnonzero(seg == _UNTAG)]

    def positives(self) -> list[int]:
        return [int(i) + self.start for i in np.flatnonzero(self._tag == _POS)]

    def counts(self) -> dict[str, int]:
        return {name: int(np.sum(self._tag == code)) for name, code in _CODE.items()}


@dataclass(frozen=True)
class PassPlan:
    """What one pass runs: which operator, how frames are ordered, and
    (tagging only) the refinement level."""
    op_id: int
    order_source: str
    level: Optional[int] = None

    def __post_init__(self):
        if self.order_source not in (TEMPORAL, RANKED, UNTAGGED_GROUPS):
            raise ValueError(f"unknown order source {self.order_source!r}")
        if self.level is not None and self.level < 1:
            raise ValueError("level must be >= 1")


# ------------------------------------------------------------- frame ordering

def temporal_priority_order(span: tuple[int, int], fps: float,
                            ranked_bins: Sequence[int], bin_s: float,
                            stride: int = 30) -> list[int]:
    """First-pass visiting order: time bins by positive-density rank,
    inside a bin a stride sweep then fill-in. Bin indexing matches the
    t=0-anchored landmark density bins (last bin absorbs overflow)."""
    start, stop = span
    nbins = len(ranked_bins)
    rank = {int(b): r for r, b in enumerate(ranked_bins)}
    buckets: dict[int, list[int]] = {}
    for f in range(start, stop):
        b = min(nbins - 1, int((f / fps) / bin_s))
        buckets.setdefault(b, []).append(f)
    order: list[int] = []
    for b in sorted(buckets, key=lambda b: rank.get(b, nbins)):
        order.extend(_stride_sweep(buckets[b], stride))
    return order


def _stride_sweep(frames: Sequence[int], stride: int) -> list[int]:
    s = max(1, int(stride))
    return [frames[i] for r in range(s) for i in range(r, len(frames), s)]


def ranking_order(queue: UploadQueue) -> list[int]:
    """Next-pass visiting order: the current queue order, best first."""
    return [f for f, _ in queue.snapshot()]


def seed_queue(queue: UploadQueue, frame_order: Iterable[int]) -> None:
    """Queue every frame at the 0.5 anchor so upload can start before any
    scores exist; scores later reprioritize entries in place. Frames a
    prior operator never reached therefore interleave at 0.5."""
    for f in frame_order:
        queue.push(f, 0.5)


# ------------------------------------------------------------- ranking passes

class RankingPass:
    """One ranking pass: visit frame_order, rescore still-queued frames,
    reprioritize them in the shared queue.

    The caller owns scoring and the clock: pull the next frame with
    next_frame(), run the operator, then report the score back."""

    def __init__(self, frame_order: Iterable[int], queue: UploadQueue):
        self._order = iter(frame_order)
        self.queue = queue
        self.scored: list[int] = []
        self._pending: Optional[int] = None
        self.done = False

    def next_frame(self) -> Optional[int]:
        if self._pending is not None:
            raise RuntimeError("previous frame not reported")
        for frame in self._order:
            if frame in self.queue:  # sent frames are skipped
                self._pending = frame
                return frame
        self.done = True
        return None

    def on_scored(self, frame: int, score: float) -> None:
        if frame != self._pending:
            raise RuntimeError("score reported out of order")
        self._pending = None
        self.scored.append(frame)
        # no-op if the uplink consumed the frame while it was being scored
        self.queue.push(frame, score)


# ------------------------------------------------------------- tagging passes

class TaggingPass:
    """One filter pass at group size `level`: rapid attempting over all
    groups, then work stealing from the upload-queue tail.

    The engine only schedules. The caller runs the filter and reports
    tags through on_tagged; cloud tags land in TagState directly and
    must be announced via note_resolved so coverage tracking stays O(1).
    Checking tags costs no camera time, only reported attempts do.
    """

    def __init__(self, level: int, span: tuple[int, int], tags: TagState,
                 queue: UploadQueue, rng: np.random.Generator):
        if level < 1:
            raise ValueError("level must be >= 1")
        if (int(span[0]), int(span[1])) != (tags.start, tags.stop):
            raise ValueError("span does not match tag state")
        self.level = int(level)
        self.start, self.stop = tags.start, tags.stop
        self.tags = tags
        self.queue = queue
        self.rng = rng
        self._groups = [(lo, min(lo + self.level, self.stop))
                        for lo in range(self.start, self.stop, self.level)]
        self._gi = 0
        self._skip: set[int] = set()  # queued frames whose group ran dry
        self._pending: Optional[tuple[int, Optional[int]]] = None
        self._uncovered = {lo for lo, hi in self._groups
                           if not tags.resolved_in(lo, hi)}
        self.attempts = 0
        self.done = False  # no camera work left in this pass

    def group_of(self, frame: int) -> tuple[int, int]:
        lo = self.start + ((frame - self.start) // self.level) * self.level
        return lo, min(lo + self.level, self.stop)

    def next_frame(self) -> Optional[int]:
        if self._pending is not None:
            raise RuntimeError("previous attempt not reported")
        while self._gi < len(self._groups):  # stage 1: rapid attempting
            lo, hi = self._groups[self._gi]
            self._gi += 1
            if self.tags.resolved_in(lo, hi):
                continue
            und = self.tags.undecided_in(lo, hi)
            if und:
                self.queue.push(und[0])  # carried over from an earlier pass
                continue
            f = lo + int(self.rng.integers(hi - lo))
            self._pending = (f, None)
            return f
        while True:  # stage 2: work stealing from the tail
            target = self._next_steal_target()
            if target is None:
                self.done = True
                return None
            lo, hi = self.group_of(target)
            cand = self.tags.untagged_in(lo, hi)
            if not cand:
                self._skip.add(target)  # dry group: frame stays queued for upload
                continue
            f1 = cand[int(self.rng.integers(len(cand)))]
            self._pending = (f1, target)
            return f1

    @property
    def steal_target(self) -> Optional[int]:
        """Queued frame the pending attempt is trying to unblock, if any."""
        return self._pending[1] if self._pending is not None else None

    def _next_steal_target(self) -> Optional[int]:
        for frame in self.queue.iter_from_tail():
            if frame not in self._skip:
                return frame
        return None

    def on_tagged(self, frame: int, tag: str) -> None:
        if self._pending is None or frame != self._pending[0]:
            raise RuntimeError("tag reported out of order")
        _, target = self._pending
        self._pending = None
        self.attempts += 1
        self.tags.set(frame, tag, source="camera")
        if tag in ("P", "N"):
            self.note_resolved(frame)
            if target is not None:
                self.queue.remove(target)  # group resolved on camera
        elif target is None:
            self.queue.push(frame)  # stage-1 undecidable goes up

    def note_resolved(self, frame: int) -> None:
        """A P/N tag landed for this frame (camera or cloud)."""
        self._uncovered.discard(self.group_of(frame)[0])

    def coverage_complete(self) -> bool:
        return not self._uncovered


# ------------------------------------------------------------ random sampling

def random_sample_stream(span: tuple[int, int],
                         rng: np.random.Generator) -> Iterator[int]:
    """Uniform without-replacement ordering of the span's frames."""
    start, stop = span
    if stop <= start:
        raise ValueError("empty span")
    for f in rng.permutation(np.arange(start, stop)):
        yield int(f)


# ------------------------------------------------------- synchronous drivers

def rank_pass(frame_order: Iterable[int], queue: UploadQueue,
              scorer: Callable[[int], float],
              budget: Optional[int] = None) -> list[int]:
    """Run a whole ranking pass with no concurrent uploads; returns the
    frames scored. budget caps how many frames get scored."""
    p = RankingPass(frame_order, queue)
    while budget is None or len(p.scored) < budget:
        f = p.next_frame()
        if f is None:
            break
        p.on_scored(f, float(scorer(f)))
    return p.scored


def filter_pass(level: int, span: tuple[int, int], tags: TagState,
                queue: UploadQueue, rng: np.random.Generator,
                tagger: Callable[[int], str]) -> TaggingPass:
    """Run a whole tagging pass with no concurrent uploads. Whatever is
    still queued afterwards is the upload set this pass produced."""
    p = TaggingPass(level, span, tags, queue, rng)
    while (f := p.next_frame()) is not None:
        p.on_tagged(f, tagger(f))
    return p
