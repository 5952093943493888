import csv
import filecmp

import pytest

from coldquery import report as R
from coldquery import simkernel as S
from coldquery import trace as T
from coldquery.baselines import run_cloudonly
from coldquery.operators import CAMERA_PRESETS, OperatorSpec, make_state
from coldquery.policies import QueryProgress, QuerySpec

SPEC = OperatorSpec(3, 16, 32, 100, T.Rect(0, 0, 1280, 720))


N = 3000  # enough landmarks at interval 10 to train for real


def tiny_trace(n=N, period=5):
    frames = [T.FrameRecord(i, float(i),
                            (T.Detection(0, 600, 300, 40, 40),)
                            if i % period == 0 else (),
                            60000, 6000)
              for i in range(n)]
    return T.Trace("tiny", 1.0, float(n), (1280, 720), frames)


def _cfg(qtype="retrieval", **kw):
    span = (0.0, float(N))
    q = {"retrieval": QuerySpec("retrieval", 0, span),
         "tagging": QuerySpec("tagging", 0, span, levels=(30, 10, 5, 1)),
         "maxcount": QuerySpec("maxcount", 0, span),
         "avgcount": QuerySpec("avgcount", 0, span),
         }[qtype]
    kw.setdefault("operator_family", [SPEC])
    kw.setdefault("landmark_interval", 10)
    kw.setdefault("seed", 0)
    return S.SimConfig(trace=tiny_trace(), query=q, **kw)


@pytest.fixture(scope="module")
def retrieval_res():
    return S.run(_cfg())


def _read(path):
    lines = path.read_text().splitlines()
    return lines[0], list(csv.reader(lines[1:]))


def test_csv_header_line(tmp_path, retrieval_res):
    R.write_events_csv(tmp_path / "e.csv", retrieval_res, "cafe0123beef")
    head, rows = _read(tmp_path / "e.csv")
    assert head == "# config_hash=cafe0123beef seed=0"
    assert rows[0] == ["time_s", "kind", "payload"]
    assert len(rows) == 1 + len(retrieval_res.events)


def test_rewrite_is_byte_identical(tmp_path, retrieval_res):
    cfg = _cfg()
    res2 = S.run(cfg)
    for i, res in enumerate((retrieval_res, res2)):
        d = tmp_path / f"d{i}"
        R.write_events_csv(d / "events.csv", res, "aa")
        R.write_progress_csv(d / "progress.csv", res, "aa")
        R.write_decisions_csv(d / "decisions.csv", res, "aa")
        R.write_summary_csv(d / "summary.csv", res, cfg, "aa")
    for name in ("events", "progress", "decisions", "summary"):
        assert filecmp.cmp(tmp_path / "d0" / f"{name}.csv",
                           tmp_path / "d1" / f"{name}.csv", shallow=False)


def test_events_csv_payload_is_sorted_json(tmp_path, retrieval_res):
    R.write_events_csv(tmp_path / "e.csv", retrieval_res, "aa")
    _, rows = _read(tmp_path / "e.csv")
    for t, kind, payload in rows[1:20]:
        float(t)
        assert payload.startswith("{") and payload.endswith("}")
        keys = [p.split(":")[0] for p in payload[1:-1].split(",") if p]
        assert keys == sorted(keys)


def test_summarize_retrieval_rows(retrieval_res):
    rows = {m: (v, u) for m, v, u in R.summarize(retrieval_res, _cfg())}
    assert rows["finished"] == (True, "bool")
    assert rows["n_results"][0] == N // 5
    assert rows["t50"][0] <= rows["t90"][0] <= rows["t99"][0]
    assert rows["bytes_uplink"][0] == retrieval_res.bytes_uplink
    # whole trace streamed / what we actually sent
    assert rows["streaming_bytes"][0] == N * 60000
    assert rows["traffic_savings"][0] == pytest.approx(
        N * 60000 / retrieval_res.bytes_uplink)


def test_summarize_tagging_and_counting_rows():
    cfg = _cfg("tagging")
    rows = {m: v for m, v, _ in R.summarize(S.run(cfg), cfg)}
    for lv in (30, 10, 5, 1):
        assert f"level_{lv}" in rows
    tagged = sum(v for k, v in rows.items() if k.startswith("tags_"))
    assert tagged == N

    cfg = _cfg("avgcount")
    rows = {m: v for m, v, _ in R.summarize(S.run(cfg), cfg)}
    assert rows["estimate"] == pytest.approx(1 / 5, abs=0.05)
    assert rows["n_samples"] > 0
    assert rows["t_converged"] <= rows["t_end"]

    cfg = _cfg("maxcount")
    rows = {m: v for m, v, _ in R.summarize(S.run(cfg), cfg)}
    assert rows["answer_count"] == 1
    assert rows["t_max"] <= rows["t_end"]


def test_family_csv(tmp_path):
    cam = CAMERA_PRESETS["embedded-default"]
    states = [make_state(SPEC, 0, cam, 250),
              make_state(OperatorSpec(5, 32, 64, 160,
                                      T.Rect(100, 50, 400, 300)), 1, cam, 250)]
    R.write_family_csv(tmp_path / "f.csv", states, "aa", 3)
    head, rows = _read(tmp_path / "f.csv")
    assert head == "# config_hash=aa seed=3"
    assert rows[0][:6] == ["id", "conv", "kernel", "dense", "input", "region"]
    assert rows[1][0] == "0" and rows[2][0] == "1"
    assert rows[2][5] == "100+50+400x300"
    assert float(rows[2][6]) > float(rows[1][6])  # bigger net costs more


def test_compare_and_speedup_csv(tmp_path, retrieval_res):
    cfg = _cfg()
    results = {"zc2": retrieval_res, "cloudonly": run_cloudonly(cfg)}
    R.write_compare_csv(tmp_path / "c.csv", results, "aa", 0)
    head, rows = _read(tmp_path / "c.csv")
    assert rows[0] == ["system", "time_s", "metric", "value"]
    systems = {r[0] for r in rows[1:]}
    assert systems == {"zc2", "cloudonly"}

    R.write_speedup_csv(tmp_path / "s.csv", results, "aa", 0)
    head, rows = _read(tmp_path / "s.csv")
    assert rows[0] == ["milestone", "zc2", "cloudonly"]
    assert [r[0] for r in rows[1:]] == ["t50", "t90", "t99"]
    for r in rows[1:]:
        assert float(r[1]) == 1.0  # baseline vs itself
        assert float(r[2]) > 0


def test_sweep_csv_column_order(tmp_path):
    rows = [{"uplink_bandwidth": 1.0, "t_end": 5.0, "t99": 4.0},
            {"uplink_bandwidth": 2.0, "t_end": 3.0, "t99": 2.5}]
    R.write_sweep_csv(tmp_path / "s.csv", "uplink_bandwidth", rows, "aa", 0)
    head, out = _read(tmp_path / "s.csv")
    assert out[0][0] == "uplink_bandwidth"
    assert out[1][0] == "1.0" and out[2][0] == "2.0"


def test_convergence_time():
    prog = QueryProgress("estimate")
    for t, v in [(0.0, 5.0), (1.0, 1.2), (2.0, 1.002), (3.0, 0.97),
                 (4.0, 1.001), (5.0, 1.0)]:
        prog.add(t, v)
    # enters the 1% band at t=4 and stays
    assert R._convergence_time(prog) == 4.0


def test_figures_render(tmp_path, retrieval_res):
    cfg = _cfg()
    R.render_progress(tmp_path / "p.png", retrieval_res, cfg)
    results = {"zc2": retrieval_res, "cloudonly": run_cloudonly(cfg)}
    R.render_compare(tmp_path / "c.png", results, cfg)
    rows = [{"x": 1.0, "t99": 4.0, "frozen_t99": 5.0},
            {"x": 2.0, "t99": 2.0, "frozen_t99": 2.0}]
    R.render_sweep(tmp_path / "s.png", "x", rows)
    for name in ("p", "c", "s"):
        p = tmp_path / f"{name}.png"
        assert p.stat().st_size > 1000
        assert p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
