import math
from dataclasses import dataclass, replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from coldquery import operators as O
from coldquery import policies as P
from coldquery import trace as T
from oracle_utils import displacement_distance as oracle_dist
from oracle_utils import enumerate_expected_displacement

FULL = T.Rect(0, 0, 1280, 720)


def mk_state(op_id, fps, auc=0.5, gamma=0.0):
    spec = O.OperatorSpec(2, 8, 16, 25, FULL)
    return O.OperatorState(op_id, spec, fps, 0.1, 1000,
                           measured_auc=auc, measured_gamma=gamma)


@dataclass
class Ev:
    time_s: float
    kind: str
    payload: dict


# -------------------------------------------------------------- config types

def test_policy_config_validation():
    P.PolicyConfig()
    for bad in (dict(alpha=0.0), dict(alpha=1.0), dict(k_decline=1.0),
                dict(beta=1.0), dict(window_w=9), dict(coverage_p=0.0),
                dict(theta_rankdist=0.0)):
        with pytest.raises(ValueError):
            P.PolicyConfig(**bad)


def test_query_spec_validation():
    q = P.QuerySpec(P.RETRIEVAL, 0, (0.0, 100.0))
    assert q.levels == (30, 10, 5, 1)
    for bad in (dict(qtype="find"), dict(span_s=(5.0, 5.0)),
                dict(fp_tol=0.0), dict(fn_tol=0.5),
                dict(levels=(10, 10, 5)), dict(levels=(30, 0))):
        kw = dict(qtype=P.TAGGING, class_id=0, span_s=(0.0, 10.0))
        kw.update(bad)
        with pytest.raises(ValueError):
            P.QuerySpec(**kw)


def test_frame_span_bounds():
    tr = T.generate_trace(T.SynthParams(trace_id="s", duration_s=100, seed=1))
    q = P.QuerySpec(P.RETRIEVAL, 0, (10.0, 20.0))
    lo, hi = q.frame_span(tr)
    assert (hi - lo) == pytest.approx(10 * tr.fps, abs=1)
    with pytest.raises(ValueError):
        P.QuerySpec(P.RETRIEVAL, 0, (10.0, 1000.0)).frame_span(tr)


# --------------------------------------------------------- retrieval selection

def test_initial_selection_rule_example():
    states = [mk_state(0, 200, 0.80), mk_state(1, 50, 0.90),
              mk_state(2, 10, 0.97)]
    got, fallback = P.retrieval_select_initial(states, r_pos=0.2, fps_net=20.0)
    assert got.op_id == 0 and not fallback  # only f=10 passes 10*0.2 > 1


def test_initial_selection_full_density_prefers_accurate():
    states = [mk_state(0, 200, 0.80), mk_state(1, 50, 0.90),
              mk_state(2, 10, 0.97)]
    got, fallback = P.retrieval_select_initial(states, r_pos=1.0, fps_net=20.0)
    assert got.op_id == 1 and not fallback  # fps 10 < fps_net drops out


def test_initial_selection_fallback_is_flagged():
    states = [mk_state(0, 30, 0.9), mk_state(1, 40, 0.8)]
    got, fallback = P.retrieval_select_initial(states, r_pos=0.001, fps_net=20.0)
    assert fallback and got.op_id == 1  # fastest wins when nothing qualifies
    with pytest.raises(ValueError):
        P.retrieval_select_initial([], 0.5, 20.0)


def _frontier():
    # speed/accuracy tradeoff: index doubles as a flops proxy
    fps = [2000, 1000, 500, 250, 125, 60, 30, 15]
    return [mk_state(i, f, 0.60 + 0.05 * i) for i, f in enumerate(fps)]


def test_doubling_bandwidth_picks_faster_initial():
    lo, _ = P.retrieval_select_initial(_frontier(), 0.2, fps_net=17.5)
    hi, _ = P.retrieval_select_initial(_frontier(), 0.2, fps_net=35.0)
    assert hi.fps_cam > lo.fps_cam


def test_doubling_compute_picks_heavier_initial():
    base = _frontier()
    fast_cam = [replace(s, fps_cam=2 * s.fps_cam) for s in base]
    a, _ = P.retrieval_select_initial(base, 0.2, fps_net=17.5)
    b, _ = P.retrieval_select_initial(fast_cam, 0.2, fps_net=17.5)
    assert b.op_id >= a.op_id  # same or heavier architecture


def test_select_next_window_example():
    states = [mk_state(i, f * 20.0, 0.7 + 0.01 * i)
              for i, f in enumerate([10, 6, 4, 2])]
    got = P.retrieval_select_next(states, f_current=10.0, fps_net=20.0,
                                  alpha=0.5)
    assert got.op_id == 1  # only f=6 lands in (5, 10)
    assert P.retrieval_select_next(states, 2.0, 20.0, 0.5) is None  # stall


def test_bandwidth_drop_shifts_window_slower():
    states = [mk_state(i, f, 0.6 + 0.02 * i)
              for i, f in enumerate([400, 300, 220, 160, 110, 80, 55, 40])]
    cur = 400.0
    full = P.retrieval_select_next(states, cur / 17.5, 17.5, 0.5)
    halved = P.retrieval_select_next(states, cur / 8.75, 8.75, 0.5)
    assert halved.fps_cam <= full.fps_cam


@given(st.lists(st.integers(1, 10 ** 6), min_size=2, max_size=8,
                unique=True),
       st.floats(0.01, 1.0, allow_nan=False),
       st.integers(1, 200),
       st.sampled_from([0.25, 0.5, 2.0, 4.0, 8.0]))
def test_selection_is_scale_invariant(fps_list, r_pos, fps_net, c):
    states = [mk_state(i, float(f), 0.5 + 0.4 * (i / len(fps_list)))
              for i, f in enumerate(fps_list)]
    scaled = [replace(s, fps_cam=s.fps_cam * c) for s in states]
    a = P.retrieval_select_initial(states, r_pos, float(fps_net))
    b = P.retrieval_select_initial(scaled, r_pos, float(fps_net) * c)
    assert a[0].op_id == b[0].op_id and a[1] == b[1]


# ------------------------------------------------------------ decline monitor

def test_decline_monitor_fires_on_k_drop():
    m = P.DeclineMonitor(window_w=10, k_decline=5.0)
    for _ in range(10):
        m.record(True)  # initial ratio 1.0
    assert m.initial_ratio == 1.0
    for _ in range(8):
        m.record(False)
        assert not m.should_upgrade()  # recent ratio still >= 1/5
    m.record(False)
    assert m.recent_ratio() == pytest.approx(0.1)
    assert m.should_upgrade()  # 0.1 < 1.0 / 5


def test_decline_monitor_spec_numbers():
    m = P.DeclineMonitor(window_w=100, k_decline=5.0)
    for _ in range(50):
        m.record(True)
    for _ in range(50):
        m.record(False)  # initial ratio 0.5
    assert m.initial_ratio == 0.5
    for _ in range(91):
        m.record(False)
    for _ in range(9):
        m.record(True)  # recent ratio 0.09
    assert m.recent_ratio() == pytest.approx(0.09)
    assert m.should_upgrade()  # 0.09 < 0.5 / 5


def test_decline_monitor_zero_start_floor():
    m = P.DeclineMonitor(window_w=10, k_decline=5.0)
    for _ in range(25):
        m.record(False)
    # all-negative start floors the reference at 1/w, so it still fires
    assert m.initial_ratio == 0.0
    assert m.should_upgrade()


def test_decline_monitor_needs_full_window():
    m = P.DeclineMonitor(window_w=10, k_decline=5.0)
    for _ in range(9):
        m.record(False)
    assert m.recent_ratio() is None
    assert not m.should_upgrade()


# ------------------------------------------------------------------- tagging

def test_effective_rate_arithmetic():
    assert P.effective_rate(50.0, 0.6, 20.0) == 50.0


def test_tagging_select_and_upgrade_examples():
    states = [mk_state(0, 100, gamma=0.3), mk_state(1, 100, gamma=0.7),
              mk_state(2, 300, gamma=0.3)]
    # rates at fps_net 20: 50, 90, 110
    got = P.tagging_select(states, 20.0)
    assert got.op_id == 2
    assert P.tagging_upgrade_due(50.0, 110.0, beta=2.0)
    assert not P.tagging_upgrade_due(50.0, 90.0, beta=2.0)
    with pytest.raises(ValueError):
        P.tagging_select([], 20.0)


def test_hard_tail_shifts_tagging_selection():
    cheap = mk_state(0, 400, gamma=0.8)
    heavy = mk_state(1, 40, gamma=0.9)
    assert P.tagging_select([cheap, heavy], 20.0).op_id == 0
    # re-measured on the hard remainder the cheap filter resolves little
    cheap_late = replace(cheap, measured_gamma=0.02)
    heavy_late = replace(heavy, measured_gamma=0.6)
    assert P.tagging_select([cheap_late, heavy_late], 20.0).op_id == 1


# ------------------------------------------------------------ ranking distance

def test_displacement_examples():
    assert P.displacement_distance([0, 1, 2], [0, 1, 2]) == 0
    assert P.displacement_distance([2, 1, 0], [0, 1, 2]) == 4
    with pytest.raises(ValueError):
        P.displacement_distance([0, 1], [0, 1, 2])
    with pytest.raises(ValueError):
        P.displacement_distance([0, 1, 1], [0, 1, 2])


def test_displacement_matches_oracle_on_small_permutations():
    import itertools
    rng = np.random.default_rng(0)
    for n in range(2, 7):
        for perm in itertools.permutations(range(n)):
            base = list(rng.permutation(n))
            a = [base[i] for i in perm]
            assert P.displacement_distance(a, base) == oracle_dist(a, base)
            assert (P.displacement_distance(a, base)
                    == P.displacement_distance(base, a))


def test_expected_random_distance_enumeration_and_tail():
    for w in range(2, 9):
        assert P.expected_random_distance(w) == pytest.approx(
            enumerate_expected_displacement(w))
    assert P.expected_random_distance(50) == pytest.approx((50 * 50 - 1) / 3)
    assert P.expected_random_distance(1) == 0.0


def test_random_permutation_mean_matches_enumeration():
    w, n = 6, 10_000
    rng = np.random.default_rng(11)
    base = list(range(w))
    mean = np.mean([P.displacement_distance(list(rng.permutation(w)), base)
                    for _ in range(n)])
    assert abs(mean - enumerate_expected_displacement(w)) \
        <= 0.02 * enumerate_expected_displacement(w)


def test_maxcount_quality_trigger():
    assert P.maxcount_quality([4, 5], [5, 4], 0.5) == (0.0, False)  # too short
    d, up = P.maxcount_quality([0, 1, 2], [0, 1, 2], 0.5)
    assert d == 0.0 and not up
    d, up = P.maxcount_quality([2, 1, 0], [0, 1, 2], 0.5)
    assert d == 4.0 and up  # 4 > 0.5 * 8/3


def test_count_ranking_ties_and_order():
    counts = {10: 3, 11: 5, 12: 3, 13: 0}
    assert P.count_ranking([10, 11, 12, 13], counts) == [11, 10, 12, 13]


def test_maxcount_r_eff():
    # positives {4,4,4,4,8,8,8,8,12,12}: 0.9 quantile lands near the top
    counts = [0] * 10 + [4] * 4 + [8] * 4 + [12] * 2
    got = P.maxcount_r_eff(counts)
    q = float(np.quantile([4] * 4 + [8] * 4 + [12] * 2, 0.9))
    want = sum(c >= q for c in counts) / len(counts)
    assert got == pytest.approx(want)
    assert P.maxcount_r_eff([0, 0, 0]) == 0.0


# ------------------------------------------------------------------ counting

def test_estimator_constant_counts():
    est = P.CountingEstimator([2])
    assert est.avg() == 2.0 and est.median() == 2.0
    est.add(2)
    assert est.avg() == 2.0 and est.median() == 2.0


def test_estimator_initial_multiset():
    est = P.CountingEstimator([0, 0, 4])
    assert est.avg() == pytest.approx(4 / 3)
    assert est.median() == 0.0
    with pytest.raises(ValueError):
        P.CountingEstimator([])


def test_estimator_seed_replacement():
    # a wrong seed for frame 10 gets overwritten by the exact observation
    est = P.CountingEstimator([3, 1], seed_frames=[10, 20])
    est.add(0, frame=10)
    assert est.n == 2
    assert est.avg() == pytest.approx(0.5)
    est.add(0, frame=10)  # no slot left: plain observation
    assert est.n == 3
    est.add(5, frame=99)  # never seeded
    assert est.n == 4
    with pytest.raises(ValueError):
        P.CountingEstimator([1, 2], seed_frames=[7])


def test_estimator_converges_on_seeded_trace():
    cls = T.ClassProfile(0, occurrence_rate=1.0,
                         hotspots=(T.Hotspot(T.Rect(100, 100, 300, 200),
                                             1.0, 20.0),),
                         count_dist=("poisson1", 1.5))
    tr = T.generate_trace(T.SynthParams(trace_id="cv", duration_s=2000,
                                        classes=(cls,), seed=21))
    truth = T.ground_truth_stats(tr, 0)
    lm_counts = [tr.frames[i].count(0) for i in range(0, tr.n_frames, 30)]
    est = P.CountingEstimator(lm_counts)
    rng = np.random.default_rng(5)
    order = rng.permutation(tr.n_frames)
    avg_err, med_err = [], []
    for f in order:
        est.add(tr.frames[int(f)].count(0))
        avg_err.append(abs(est.avg() - truth.avg) / truth.avg)
        med_err.append(abs(est.median() - truth.median)
                       / max(truth.median, 1.0))
    def stay_point(errs, tol):
        k = len(errs)
        while k > 0 and errs[k - 1] <= tol:
            k -= 1
        return k  # first index after which error stays under tol
    n = tr.n_frames
    assert stay_point(avg_err, 0.01) < n  # enters and stays within 1%
    assert stay_point(med_err, 0.01) < 0.25 * n  # discrete median locks early
    assert avg_err[-1] <= 0.01


# ------------------------------------------------------------ validation split

def test_split_pool_deterministic_and_sized():
    frames = range(20_000)
    train, val = P.split_pool(frames)
    assert sorted(train + val) == list(frames)
    assert 0.28 <= len(val) / 20_000 <= 0.32
    again = P.split_pool(frames)
    assert (train, val) == again
    assert P.is_validation_frame(7) == (7 in set(val))


# -------------------------------------------------------------- materialization

def _hand_trace():
    frames = []
    for i in range(10):
        dets = (T.Detection(0, 10, 10, 20, 20),) if i in (3, 7, 9) else ()
        frames.append(T.FrameRecord(i, float(i), dets, 60000, 6000))
    return T.Trace("hand", 1.0, 10.0, (1280, 720), tuple(frames))


def test_materialize_retrieval_recall_curve():
    tr = _hand_trace()
    q = P.QuerySpec(P.RETRIEVAL, 0, (0.0, 10.0))
    events = [Ev(5.0, "result_emitted", {"frame": 7}),
              Ev(9.0, "result_emitted", {"frame": 3})]
    res = P.materialize(q, events, tr)
    assert res.answer == [3, 7]
    assert res.progress.metric == "recall"
    assert res.progress.values == pytest.approx([1 / 3, 2 / 3])
    assert all(a <= b for a, b in
               zip(res.progress.values, res.progress.values[1:]))


def test_materialize_retrieval_no_positives():
    tr = _hand_trace()
    q = P.QuerySpec(P.RETRIEVAL, 5, (0.0, 10.0))
    res = P.materialize(q, [], tr)
    assert res.answer == [] and res.progress.final(1.0) == 1.0


def test_materialize_tagging_levels():
    tr = _hand_trace()
    q = P.QuerySpec(P.TAGGING, 0, (0.0, 10.0))
    events = [Ev(1.0, "result_emitted", {"frame": 2, "tag": "N"}),
              Ev(2.0, "pass_completed", {"level": 30}),
              Ev(3.0, "result_emitted", {"frame": 3, "tag": "P"}),
              Ev(4.0, "pass_completed", {"level": 10})]
    res = P.materialize(q, events, tr)
    assert res.answer == {2: "N", 3: "P"}
    assert res.progress.values == [30, 10]
    assert all(a >= b for a, b in
               zip(res.progress.values, res.progress.values[1:]))


def test_materialize_maxcount_running_max():
    tr = _hand_trace()
    q = P.QuerySpec(P.MAXCOUNT, 0, (0.0, 10.0))
    events = [Ev(1.0, "result_emitted", {"frame": 4, "count": 2}),
              Ev(2.0, "result_emitted", {"frame": 8, "count": 5}),
              Ev(3.0, "result_emitted", {"frame": 1, "count": 3})]
    res = P.materialize(q, events, tr)
    assert res.progress.values == [2, 5, 5]
    assert res.answer == {"frame": 8, "count": 5}
    assert res.progress.values[-1] >= max(e.payload["count"] for e in events)


def test_materialize_estimates():
    tr = _hand_trace()
    q = P.QuerySpec(P.AVGCOUNT, 0, (0.0, 10.0))
    events = [Ev(1.0, "result_emitted", {"estimate": 1.5, "n": 3}),
              Ev(2.0, "result_emitted", {"estimate": 1.2, "n": 4})]
    res = P.materialize(q, events, tr)
    assert res.progress.values == [1.5, 1.2]
    assert res.answer == 1.2
    empty = P.materialize(q, [], tr)
    assert math.isnan(empty.answer)
