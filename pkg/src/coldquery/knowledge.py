"""Long-term video knowledge distilled from landmark frames.

Landmarks are sparse frames (default one in thirty) annotated with exact
detections at capture time and kept as small thumbnails.  From them we
derive where objects show up (spatial heatmap, crop regions), when they
show up (temporal density), and how often (positive ratio).  A corruption
knob degrades landmark annotations to study sensitivity to an inaccurate
capture-time detector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .trace import Detection, Rect, Trace

GRID = (32, 32)
CROP_COVERAGES = (0.75, 0.90, 0.95, 1.0)
COLLAPSE_LIMIT = 600  # above this many points, k-enclosing bins to cell centers


@dataclass(frozen=True)
class Landmark:
    frame_index: int
    timestamp_s: float
    detections: tuple


def corrupt_detections(dets, drop_p, spurious_rate, rng, resolution,
                       spurious_classes=(0,), spurious_bbox=(48, 36)):
    """Detector-noise model: each true detection survives with probability
    1 - drop_p; with probability spurious_rate one phantom detection is
    added at a uniform position."""
    out = [d for d in dets if rng.random() >= drop_p]
    if rng.random() < spurious_rate:
        w, h = resolution
        bw, bh = spurious_bbox
        cid = int(rng.choice(spurious_classes))
        x = int(rng.integers(0, max(1, w - bw)))
        y = int(rng.integers(0, max(1, h - bh)))
        out.append(Detection(cid, x, y, bw, bh))
    return tuple(out)


def sample_landmarks(trace: Trace, interval_frames: int = 30,
                     drop_p: float = 0.0, spurious_rate: float = 0.0,
                     rng=None, spurious_classes=(0,)):
    if interval_frames < 1:
        raise ValueError("landmark interval must be >= 1 frame")
    if (drop_p or spurious_rate) and rng is None:
        raise ValueError("corruption requires an rng")
    marks = []
    for i in range(0, trace.n_frames, interval_frames):
        fr = trace.frames[i]
        dets = fr.detections
        if drop_p or spurious_rate:
            dets = corrupt_detections(dets, drop_p, spurious_rate, rng,
                                      trace.resolution, spurious_classes)
        marks.append(Landmark(i, fr.timestamp_s, dets))
    return marks


def class_points(landmarks, class_id: int) -> np.ndarray:
    """Detection centers for one class, shape (m, 2), in landmark order."""
    pts = [d.center() for lm in landmarks for d in lm.detections if d.class_id == class_id]
    return np.array(pts, dtype=int).reshape(-1, 2)


@dataclass
class Heatmap:
    grid: tuple
    counts: np.ndarray  # shape (grid_w, grid_h)
    resolution: tuple

    @property
    def cell_px(self):
        return (self.resolution[0] / self.grid[0], self.resolution[1] / self.grid[1])

    def normalized(self) -> np.ndarray:
        total = self.counts.sum()
        if total == 0:
            return np.zeros_like(self.counts, dtype=float)
        return self.counts / total


def build_heatmap(points: np.ndarray, resolution, grid=GRID) -> Heatmap:
    gw, gh = grid
    w, h = resolution
    counts = np.zeros((gw, gh), dtype=np.int64)
    if len(points):
        cx = np.minimum((points[:, 0] * gw) // w, gw - 1)
        cy = np.minimum((points[:, 1] * gh) // h, gh - 1)
        np.add.at(counts, (cx, cy), 1)
    return Heatmap(grid, counts, tuple(resolution))


def tv_distance(a: Heatmap, b: Heatmap) -> float:
    ta, tb = a.counts.sum(), b.counts.sum()
    if ta == 0 and tb == 0:
        return 0.0
    if ta == 0 or tb == 0:
        return 1.0
    return 0.5 * float(np.abs(a.normalized() - b.normalized()).sum())


def _collapse_points(points, weights, grid):
    gw, gh = grid
    x0, y0 = points.min(axis=0)
    x1, y1 = points.max(axis=0)
    spanx = max(1, x1 - x0)
    spany = max(1, y1 - y0)
    cx = np.minimum(((points[:, 0] - x0) * gw) // spanx, gw - 1)
    cy = np.minimum(((points[:, 1] - y0) * gh) // spany, gh - 1)
    acc = np.zeros((gw, gh), dtype=np.int64)
    np.add.at(acc, (cx, cy), weights)
    ix, iy = np.nonzero(acc)
    centers_x = x0 + ((ix + 0.5) * spanx / gw).astype(int)
    centers_y = y0 + ((iy + 0.5) * spany / gh).astype(int)
    pts = np.stack([centers_x, centers_y], axis=1)
    return pts, acc[ix, iy]


def k_enclosing_region(points, p: float, weights=None, grid=GRID) -> Rect:
    """Smallest-area axis-aligned rectangle, edges on point coordinates,
    covering at least ceil(p * total weight) of the points.  Exact search
    over candidate edge pairs; point sets larger than COLLAPSE_LIMIT are
    first binned to weighted cell centers.  Ties resolve to the smallest
    (area, x, y, w)."""
    points = np.asarray(points, dtype=int).reshape(-1, 2)
    if len(points) == 0:
        raise ValueError("k_enclosing_region needs at least one point")
    if not (0.0 < p <= 1.0):
        raise ValueError("coverage p must be in (0, 1]")
    if weights is None:
        weights = np.ones(len(points), dtype=np.int64)
    else:
        weights = np.asarray(weights, dtype=np.int64)
    if len(points) > COLLAPSE_LIMIT:
        points, weights = _collapse_points(points, weights, grid)

    k = math.ceil(p * int(weights.sum()) - 1e-9)
    xs = np.unique(points[:, 0])
    ys = np.unique(points[:, 1])
    xi = np.searchsorted(xs, points[:, 0])
    yi = np.searchsorted(ys, points[:, 1])
    w2d = np.zeros((len(xs), len(ys)), dtype=np.int64)
    np.add.at(w2d, (xi, yi), weights)
    # prefix[i, j] = weight with x < xs[i], y < ys[j]
    prefix = np.zeros((len(xs) + 1, len(ys) + 1), dtype=np.int64)
    prefix[1:, 1:] = w2d.cumsum(axis=0).cumsum(axis=1)

    best = None  # (area, x, y, w, h)
    for i1 in range(len(xs)):
        for i2 in range(i1, len(xs)):
            width = int(xs[i2] - xs[i1] + 1)
            col = prefix[i2 + 1] - prefix[i1]  # cumulative weight over y, len ny+1
            if col[-1] < k:
                continue
            # for each top edge j2, widest j1 keeping count >= k
            j1 = np.searchsorted(col, col[1:] - k, side="right") - 1
            ok = j1 >= 0
            if not ok.any():
                continue
            j2 = np.nonzero(ok)[0]
            j1 = j1[ok]
            heights = (ys[j2] - ys[j1] + 1).astype(int)
            areas = width * heights
            a = int(areas.min())
            if best is not None and a > best[0]:
                continue
            sel = areas == a
            y_best = int(ys[j1[sel]].min())
            hsel = heights[sel][ys[j1[sel]] == y_best]
            cand = (a, int(xs[i1]), y_best, width, int(hsel.min()))
            if best is None or (cand[0], cand[1], cand[2], cand[3]) < (best[0], best[1], best[2], best[3]):
                best = cand
    area, x, y, w, h = best
    return Rect(x, y, w, h)


def crop_ladder(points, resolution, coverages=CROP_COVERAGES):
    """Crop regions at increasing coverage of the observed points. Falls
    back to the full frame when there are no points to enclose."""
    w, h = resolution
    full = Rect(0, 0, w, h)
    if len(points) == 0:
        return [(c, full) for c in coverages]
    return [(c, k_enclosing_region(points, c)) for c in coverages]


@dataclass
class TemporalDensity:
    bin_s: float
    positives: np.ndarray
    totals: np.ndarray

    def fractions(self) -> np.ndarray:
        out = np.zeros(len(self.totals))
        nz = self.totals > 0
        out[nz] = self.positives[nz] / self.totals[nz]
        return out

    def ranked_bins(self):
        """Bin indices from densest to sparsest; ties to the earlier bin."""
        fr = self.fractions()
        return sorted(range(len(fr)), key=lambda i: (-fr[i], i))


def temporal_density(landmarks, class_id: int, duration_s: float,
                     bin_s: float = 3600.0) -> TemporalDensity:
    nbins = max(1, math.ceil(duration_s / bin_s - 1e-9))
    pos = np.zeros(nbins, dtype=np.int64)
    tot = np.zeros(nbins, dtype=np.int64)
    for lm in landmarks:
        b = min(nbins - 1, int(lm.timestamp_s / bin_s))
        tot[b] += 1
        if any(d.class_id == class_id for d in lm.detections):
            pos[b] += 1
    return TemporalDensity(bin_s, pos, tot)


def estimate_pos_ratio(landmarks, class_id: int, region: Rect | None = None) -> float:
    if not landmarks:
        return 0.0
    hits = 0
    for lm in landmarks:
        for d in lm.detections:
            if d.class_id == class_id and (region is None or region.contains(*d.center())):
                hits += 1
                break
    return hits / len(landmarks)


@dataclass
class KnowledgeSummary:
    class_id: int
    n_landmarks: int
    r_pos: float
    heatmap: Heatmap
    density: TemporalDensity
    crops: list  # [(coverage, Rect)]
    points: np.ndarray


def build_knowledge(landmarks, class_id: int, resolution, duration_s,
                    bin_s: float = 3600.0,
                    coverages=CROP_COVERAGES) -> KnowledgeSummary:
    pts = class_points(landmarks, class_id)
    return KnowledgeSummary(
        class_id=class_id,
        n_landmarks=len(landmarks),
        r_pos=estimate_pos_ratio(landmarks, class_id),
        heatmap=build_heatmap(pts, resolution),
        density=temporal_density(landmarks, class_id, duration_s, bin_s),
        crops=crop_ladder(pts, resolution, coverages),
        points=pts,
    )
