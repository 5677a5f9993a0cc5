import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from arcnn import evaluation as ev
from arcnn.annot import Detection, FrameAnnotation, PairedObject
from arcnn.geom import Box

from oracles import greedy_match, mr_by_threshold_enumeration


def gt_frame(fid, boxes, ignore=(), size=(200, 150)):
    objs = []
    for k, b in enumerate(boxes):
        objs.append(PairedObject(k + 1000 * int(fid[1:]), Box(*b), Box(*b), ignore=k in ignore))
    return FrameAnnotation(fid, size, tuple(objs))


def random_fixture(rng, n_frames=3, max_gt=3, max_det=5):
    frames, dets, oracle_in = [], [], []
    for f in range(n_frames):
        n_gt = int(rng.integers(0, max_gt + 1))
        gts = [[float(x) for x in np.r_[rng.uniform(0, 120, 2), rng.uniform(10, 40, 2)]] for _ in range(n_gt)]
        ign = {k for k in range(n_gt) if rng.random() < 0.2}
        fr = gt_frame(f"f{f}", gts, ign)
        frames.append(fr)
        fd = []
        for _ in range(int(rng.integers(0, max_det + 1))):
            if gts and rng.random() < 0.6:
                g = gts[int(rng.integers(0, len(gts)))]
                b = [g[0] + rng.normal(0, 4), g[1] + rng.normal(0, 4), g[2], g[3]]
            else:
                b = [float(x) for x in np.r_[rng.uniform(0, 120, 2), rng.uniform(10, 40, 2)]]
            s = float(rng.integers(0, 8)) / 7.0  # ties on purpose
            fd.append((s, b))
            dets.append(Detection(fr.frame_id, Box(*b), s))
        oracle_in.append((gts, [k in ign for k in range(n_gt)], fd))
    return frames, dets, oracle_in


def test_match_frame_examples():
    m = ev.match_frame(np.zeros((0, 4)), np.array([[0, 0, 10, 10]]))
    assert not m.gt_matched.any()
    m = ev.match_frame(np.array([[0, 0, 10, 10], [1, 0, 10, 10]]), np.array([[0, 0, 10, 10]]))
    assert list(m.status) == [1, 0]
    m = ev.match_frame(np.array([[0, 0, 10, 10]]), np.array([[0, 0, 10, 10]]), np.array([True]))
    assert list(m.status) == [-1]


def test_match_frame_equals_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        gts = np.c_[rng.uniform(0, 40, (5, 2)), rng.uniform(10, 30, (5, 2))]
        dets = gts[rng.integers(0, 5, 10)] + np.c_[rng.normal(0, 5, (10, 2)), np.zeros((10, 2))]
        ign = rng.random(5) < 0.3
        m = ev.match_frame(dets, gts, ign)
        assert list(m.status) == greedy_match(dets.tolist(), gts.tolist(), ign.tolist())


def test_perfect_and_empty_detectors():
    frames = [gt_frame("f0", [[10, 10, 20, 50], [60, 10, 20, 50]]), gt_frame("f1", [[5, 5, 30, 60]])]
    perfect = [Detection(fr.frame_id, o.reference_box, 1.0) for fr in frames for o in fr.objects]
    assert ev.mr_score(frames, perfect).mr == pytest.approx(ev.MISS_RATE_FLOOR)
    assert ev.mr_score(frames, []).mr == 1.0


def test_no_ground_truth_is_explicit_marker():
    res = ev.mr_score([gt_frame("f0", [])], [Detection("f0", Box(0, 0, 5, 5), 0.3)])
    assert res.mr is None and res.value == ev.NO_GT


def test_unknown_frame_detection_rejected():
    with pytest.raises(ValueError):
        ev.mr_score([gt_frame("f0", [[0, 0, 5, 5]])], [Detection("zz", Box(0, 0, 5, 5), 0.3)])


def test_fixture_three_frames_five_gt_eight_detections():
    frames = [gt_frame("f0", [[10, 10, 20, 40], [50, 10, 20, 40]]), gt_frame("f1", [[0, 0, 30, 60]]),
              gt_frame("f2", [[100, 50, 20, 40], [20, 80, 25, 50]])]
    raw = [("f0", [11, 10, 20, 40], 0.9), ("f0", [80, 80, 10, 10], 0.85), ("f1", [2, 1, 30, 60], 0.8),
           ("f1", [1, 0, 30, 60], 0.7), ("f2", [100, 52, 20, 40], 0.6), ("f2", [0, 0, 10, 10], 0.5),
           ("f0", [51, 12, 20, 40], 0.4), ("f2", [150, 90, 20, 20], 0.3)]
    dets = [Detection(f, Box(*b), s) for f, b, s in raw]
    oracle_in = []
    for fr in frames:
        gts = [o.reference_box.as_list() for o in fr.objects]
        oracle_in.append((gts, [False] * len(gts), [(s, b) for f, b, s in raw if f == fr.frame_id]))
    want, _ = mr_by_threshold_enumeration(oracle_in)
    assert abs(ev.mr_score(frames, dets).mr - want) <= 1e-12


def test_mr_equals_threshold_enumeration_oracle_on_random_fixtures():
    rng = np.random.default_rng(1)
    checked = 0
    for _ in range(300):
        frames, dets, oracle_in = random_fixture(rng, n_frames=int(rng.integers(1, 11)))
        res = ev.mr_score(frames, dets)
        if res.mr is None:
            continue
        want, _ = mr_by_threshold_enumeration(oracle_in)
        assert abs(res.mr - want) <= 1e-12
        checked += 1
    assert checked > 200


def test_curve_is_monotone():
    rng = np.random.default_rng(2)
    for _ in range(200):
        frames, dets, _ = random_fixture(rng, n_frames=4, max_det=8)
        res = ev.mr_score(frames, dets)
        f, m = res.curve.fppi(), res.curve.miss()
        assert np.all(np.diff(f) >= 0) and np.all(np.diff(m) <= 0)


def test_sensed_modality_uses_sensed_boxes():
    fr = FrameAnnotation("f0", (200, 150), (PairedObject(1, Box(10, 10, 20, 40), Box(40, 10, 20, 40)),))
    at_sensed = [Detection("f0", Box(40, 10, 20, 40), 1.0, "sensed")]
    assert ev.mr_score([fr], at_sensed, "sensed").mr == pytest.approx(ev.MISS_RATE_FLOOR)
    assert ev.mr_score([fr], at_sensed, "reference").mr == 1.0


def test_unpaired_objects_become_ignore_regions():
    fr = FrameAnnotation("f0", (200, 150), (PairedObject(1, Box(10, 10, 20, 40), None),
                                            PairedObject(2, Box(80, 10, 20, 40), Box(80, 10, 20, 40))))
    gt, ign = ev.frame_ground_truth(fr, "sensed")
    assert list(ign) == [True, False]
    dets = [Detection("f0", Box(10, 10, 20, 40), 0.9, "sensed"), Detection("f0", Box(80, 10, 20, 40), 0.8, "sensed")]
    assert ev.mr_score([fr], dets, "sensed").mr == pytest.approx(ev.MISS_RATE_FLOOR)


def test_grids():
    full = ev.full_grid()
    assert len(full) == 169 and len(set(full)) == 169
    sets = ev.direction_sets()
    assert all(len(v) == 21 for v in sets.values())
    assert len(ev.directions_grid()) == 81
    assert set(sets["S45"]) == {(k, k) for k in range(-10, 11)}
    assert set(sets["S135"]) == {(-k, k) for k in range(-10, 11)}


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=81, max_size=81))
def test_direction_metrics_against_one_line_oracle(vals):
    grid = dict(zip(ev.directions_grid(), vals))
    got = ev.direction_metrics(grid)
    for name, modes in ev.direction_sets().items():
        v = [grid[m] for m in modes]
        mu = sum(v) / len(v)
        assert got[name][0] == pytest.approx(mu, abs=1e-12)
        assert got[name][1] == pytest.approx(math.sqrt(sum((x - mu) ** 2 for x in v) / len(v)), abs=1e-12)


def test_direction_metrics_missing_mode():
    grid = dict.fromkeys(ev.directions_grid(), 0.5)
    del grid[(3, 3)]
    with pytest.raises(ev.MissingModeError, match=r"\(3, 3\)"):
        ev.direction_metrics(grid)


def test_translate_image():
    img = np.arange(2 * 3 * 4, dtype=float).reshape(2, 3, 4) + 1
    out = ev.translate_image(img, 1, -1)
    assert out[0, 0, 1] == img[0, 1, 0]
    assert out[0, 2, 0] == 0 and out[0, 0, 0] == 0
    assert np.array_equal(ev.translate_image(img, 0, 0), img)
    assert not ev.translate_image(img, 5, 0).any()


def test_sweep_identity_constant_and_failure():
    frames = [gt_frame("f0", [[10, 10, 20, 40]]), gt_frame("f1", [[50, 20, 20, 40]])]

    def detect(dx, dy):
        return [Detection(fr.frame_id, o.reference_box, 0.9) for fr in frames for o in fr.objects]

    res = ev.shift_grid_sweep(detect, frames, ev.directions_grid(), min_height=10)
    assert len(res.grid) == 81
    assert res.grid[(0, 0)] == ev.mr_score(frames, detect(0, 0)).mr
    assert all(s == 0 for _, s in ev.direction_metrics(res.grid).values())
    threaded = ev.shift_grid_sweep(detect, frames, ev.full_grid(), min_height=10, threads=3)
    assert len(threaded.grid) == 169

    def broken(dx, dy):
        if (dx, dy) == (2, -1):
            raise RuntimeError("boom")
        return []

    with pytest.raises(ev.SweepError, match=r"\(2, -1\)"):
        ev.shift_grid_sweep(broken, frames, ev.full_grid(), min_height=10)


def _report():
    grid = {m: 0.1 + 0.01 * (m[0] + m[1] + 40) for m in ev.directions_grid()}
    grid[(1, 1)] = None
    return ev.Report(0.25, [(0.0, 1.0), (0.5, 0.3)], grid, {"S0": (0.3, 0.05), "S45": (0.2, 0.01)})


def test_report_json_round_trip(tmp_path):
    rep = _report()
    p = tmp_path / "r.json"
    ev.emit_report(rep, p, "json")
    doc = json.loads(p.read_text())
    assert doc["schema"] == ev.REPORT_SCHEMA
    assert ev.read_report(p) == rep


def test_report_csv_round_trip_and_row_count(tmp_path):
    rep = _report()
    p = tmp_path / "r.csv"
    ev.emit_report(rep, p, "csv")
    rows = [r for r in csv.reader(line for line in p.read_text().splitlines() if not line.startswith("#"))]
    assert len(rows) == 1 + len(rep.grid) + len(rep.directions)
    assert ev.read_report(p) == rep
    with pytest.raises(ValueError):
        ev.emit_report(rep, tmp_path / "x", "xml")


def test_report_schema_mismatch(tmp_path):
    p = tmp_path / "r.json"
    p.write_text(json.dumps({"schema": "other/9"}))
    with pytest.raises(ValueError):
        ev.read_report(p)
