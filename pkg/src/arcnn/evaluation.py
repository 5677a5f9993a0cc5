"""Detection scoring: matching, FPPI/miss-rate curves, log-average miss rate,
the position-shift sweep and its directional summary."""
from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import geom
from .annot import Detection, FrameAnnotation, reasonable_filter, shift_all_sensed

REPORT_SCHEMA = "arcnn-eval/1"
NO_GT = "no-gt"
MISS_RATE_FLOOR = 1e-4
FPPI_SAMPLES = np.logspace(-2.0, 0.0, 9)

TP, FP, IGNORED = 1, 0, -1


@dataclass
class FrameMatch:
    status: np.ndarray  # per detection: 1 TP, 0 FP, -1 matched an ignore region
    gt_matched: np.ndarray  # per GT: bool
    assignment: np.ndarray  # per detection: matched GT index or -1


def match_frame(det_boxes: np.ndarray, gt_boxes: np.ndarray, gt_ignore: Optional[np.ndarray] = None,
                iou_threshold: float = 0.5) -> FrameMatch:
    """Greedy one-to-one matching; detections must already be in descending score order.

    Each detection takes the unmatched GT with the highest IoU >= threshold
    (lower index on ties).
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    ignore = np.zeros(len(gt_boxes), dtype=bool) if gt_ignore is None else np.asarray(gt_ignore, dtype=bool)
    status = np.full(len(det_boxes), FP, dtype=np.int64)
    assignment = np.full(len(det_boxes), -1, dtype=np.int64)
    matched = np.zeros(len(gt_boxes), dtype=bool)
    if len(det_boxes) == 0 or len(gt_boxes) == 0:
        return FrameMatch(status, matched, assignment)
    ious = geom.iou_matrix(det_boxes, gt_boxes)
    for d in range(len(det_boxes)):
        cand = np.where(~matched & (ious[d] >= iou_threshold), ious[d], -1.0)
        j = int(np.argmax(cand))
        if cand[j] < 0:
            continue
        matched[j] = True
        assignment[d] = j
        status[d] = IGNORED if ignore[j] else TP
    return FrameMatch(status, matched, assignment)


@dataclass
class EvalCurve:
    points: list  # (fppi, miss_rate), threshold falling from +inf
    thresholds: list

    def fppi(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    def miss(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])


@dataclass
class MrResult:
    mr: Optional[float]  # None when there is no ground truth
    curve: EvalCurve
    n_gt: int
    n_frames: int

    @property
    def value(self):
        return NO_GT if self.mr is None else self.mr


def frame_ground_truth(frame: FrameAnnotation, modality: str):
    """GT boxes and ignore flags of one frame in ``modality``.

    Objects lacking a box in that modality become ignore regions at their
    other box, so detections on them are not counted as false positives.
    """
    boxes, ignore = [], []
    for o in frame.objects:
        b = o.box(modality)
        if b is None:
            boxes.append(o.any_box.as_list())
            ignore.append(True)
        else:
            boxes.append(b.as_list())
            ignore.append(bool(o.ignore))
    return np.array(boxes, dtype=np.float64).reshape(-1, 4), np.array(ignore, dtype=bool)


def sample_log_average(curve: EvalCurve, samples=FPPI_SAMPLES, floor: float = MISS_RATE_FLOOR) -> float:
    fppi = curve.fppi()
    miss = curve.miss()
    vals = []
    for s in samples:
        idx = np.flatnonzero(fppi <= s)
        vals.append(max(miss[idx[-1]], floor))
    return float(np.exp(np.mean(np.log(vals))))


def mr_score(frames: Sequence[FrameAnnotation], detections: Iterable[Detection],
             modality: str = "reference", iou_threshold: float = 0.5) -> MrResult:
    """Log-average miss rate over FPPI in [1e-2, 1] against ``modality`` GT.

    Frames should already carry ignore marks (see ``reasonable_filter``).
    """
    frames = list(frames)
    index = {fr.frame_id: i for i, fr in enumerate(frames)}
    per_frame: list[list] = [[] for _ in frames]
    for k, d in enumerate(detections):
        if d.modality != modality:
            continue
        if d.frame_id not in index:
            raise ValueError(f"detection for unknown frame {d.frame_id!r}")
        per_frame[index[d.frame_id]].append((d.score, k, d.box.as_list()))

    n_gt = 0
    scores, keys, status = [], [], []
    for fi, fr in enumerate(frames):
        gt, ign = frame_ground_truth(fr, modality)
        n_gt += int((~ign).sum())
        dets = sorted(per_frame[fi], key=lambda t: (-t[0], t[1]))
        m = match_frame(np.array([d[2] for d in dets]), gt, ign, iou_threshold)
        for d, st in zip(dets, m.status):
            scores.append(d[0])
            keys.append((fi, d[1]))
            status.append(st)
    n_frames = len(frames)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], keys[i]))
    scores_o = np.array([scores[i] for i in order])
    status_o = np.array([status[i] for i in order], dtype=np.int64)
    tp = np.cumsum(status_o == TP)
    fp = np.cumsum(status_o == FP)

    points = [(0.0, 1.0 if n_gt else 0.0)]
    thresholds = [float("inf")]
    for i in range(len(order)):
        if i + 1 < len(order) and scores_o[i + 1] == scores_o[i]:
            continue  # tied scores enter the curve together
        miss = 1.0 - tp[i] / n_gt if n_gt else 0.0
        points.append((fp[i] / n_frames if n_frames else 0.0, float(miss)))
        thresholds.append(float(scores_o[i]))
    curve = EvalCurve(points, thresholds)
    mr = sample_log_average(curve) if n_gt else None
    return MrResult(mr, curve, n_gt, n_frames)


# -- shift sweep -----------------------------------------------------------------------

SHIFT_RANGE_FULL = 6
SHIFT_RANGE_DIRECTIONS = 10


def full_grid(extent: int = SHIFT_RANGE_FULL) -> list[tuple[int, int]]:
    r = range(-extent, extent + 1)
    return [(dx, dy) for dy in r for dx in r]


def direction_sets(extent: int = SHIFT_RANGE_DIRECTIONS) -> dict[str, list[tuple[int, int]]]:
    r = range(-extent, extent + 1)
    return {"S0": [(k, 0) for k in r], "S45": [(k, k) for k in r],
            "S90": [(0, k) for k in r], "S135": [(-k, k) for k in r]}


def directions_grid(extent: int = SHIFT_RANGE_DIRECTIONS) -> list[tuple[int, int]]:
    modes = set()
    for ms in direction_sets(extent).values():
        modes.update(ms)
    return sorted(modes, key=lambda m: (m[1], m[0]))


def translate_image(image: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Whole-pixel translation of ``(C, H, W)`` with zero fill."""
    dx, dy = int(dx), int(dy)
    out = np.zeros_like(image)
    _, h, w = image.shape
    if abs(dx) >= w or abs(dy) >= h:
        return out
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[:, yd, xd] = image[:, ys, xs]
    return out


class SweepError(RuntimeError):
    def __init__(self, mode, cause):
        super().__init__(f"detector failed on shift mode {mode}: {cause}")
        self.mode = mode


@dataclass
class SweepResult:
    grid: dict  # (dx, dy) -> MR (None when no GT)
    directions: dict = field(default_factory=dict)  # name -> (mu, sigma)
    curves: dict = field(default_factory=dict)


def shift_grid_sweep(detect: Callable[[int, int], list], frames: Sequence[FrameAnnotation],
                     shift_set: Sequence[tuple[int, int]], modality: str = "reference",
                     min_height: float = 55.0, allow_occluded: bool = False,
                     threads: Optional[int] = None) -> SweepResult:
    """Score ``detect(dx, dy)`` (detections for sensed images moved by whole pixels)
    against the shifted annotations, for every mode in ``shift_set``."""
    if threads is None:
        threads = int(os.environ.get("ARCNN_THREADS", "1") or 1)

    def run(mode):
        dx, dy = mode
        try:
            dets = detect(dx, dy)
        except Exception as exc:  # noqa: BLE001 - re-raised with the mode attached
            raise SweepError(mode, exc) from exc
        gt = reasonable_filter(shift_all_sensed(frames, dx, dy), min_height, allow_occluded)
        return mr_score(gt, dets, modality)

    modes = list(dict.fromkeys((int(dx), int(dy)) for dx, dy in shift_set))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, modes))
    else:
        results = [run(m) for m in modes]
    return SweepResult({m: r.mr for m, r in zip(modes, results)}, {},
                       {m: r.curve for m, r in zip(modes, results)})


class MissingModeError(KeyError):
    pass


def direction_metrics(grid: dict, extent: int = SHIFT_RANGE_DIRECTIONS) -> dict[str, tuple[float, float]]:
    """Mean and population std of MR along the 0/45/90/135 degree shift directions."""
    out = {}
    for name, modes in direction_sets(extent).items():
        vals = []
        for m in modes:
            if m not in grid:
                raise MissingModeError(f"grid lacks mode {m} needed by {name}")
            if grid[m] is None:
                raise MissingModeError(f"mode {m} has no ground truth")
            vals.append(grid[m])
        v = np.array(vals, dtype=np.float64)
        # offsets from the first value keep a constant direction at exactly sigma = 0
        d = v - v[0]
        out[name] = (float(v[0] + d.mean()), float(d.std()))
    return out


# -- reports ---------------------------------------------------------------------------

@dataclass
class Report:
    mr: Optional[float] = None
    curve: list = field(default_factory=list)
    grid: dict = field(default_factory=dict)
    directions: dict = field(default_factory=dict)
    modality: str = "reference"


def report_to_document(rep: Report) -> dict:
    return {"schema": REPORT_SCHEMA,
            "mr": NO_GT if rep.mr is None else float(rep.mr),
            "curve": [[float(f), float(m)] for f, m in rep.curve],
            "grid": [{"dx": int(dx), "dy": int(dy), "mr": NO_GT if v is None else float(v)}
                     for (dx, dy), v in sorted(rep.grid.items(), key=lambda kv: (kv[0][1], kv[0][0]))],
            "directions": {k: {"mu": float(mu), "sigma": float(sg)}
                           for k, (mu, sg) in sorted(rep.directions.items(), key=lambda kv: _dir_key(kv[0]))},
            "modality": rep.modality,
            "miss_rate_floor": MISS_RATE_FLOOR}


def _dir_key(name: str) -> int:
    return int(name[1:]) if name[1:].isdigit() else 10 ** 6


def _mr_value(v):
    return None if v == NO_GT else float(v)


def document_to_report(doc: dict) -> Report:
    if doc.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"report schema {doc.get('schema')!r}, expected {REPORT_SCHEMA!r}")
    return Report(_mr_value(doc["mr"]), [tuple(p) for p in doc["curve"]],
                  {(g["dx"], g["dy"]): _mr_value(g["mr"]) for g in doc["grid"]},
                  {k: (v["mu"], v["sigma"]) for k, v in doc["directions"].items()},
                  doc.get("modality", "reference"))


CSV_HEADER = ["kind", "dx", "dy", "mr", "direction", "mu", "sigma"]


def emit_report(rep: Report, path, fmt: str = "json") -> None:
    """Write ``rep`` as schema-tagged JSON or CSV.

    The CSV holds one header row, one row per grid mode and one per
    direction; the scalar MR and the curve ride on leading ``#`` lines.
    """
    doc = report_to_document(rep)
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            if fmt == "json":
                json.dump(doc, fh, indent=1)
                fh.write("\n")
            elif fmt == "csv":
                fh.write(f"# schema={REPORT_SCHEMA}\n")
                fh.write(f"# mr={json.dumps(doc['mr'])}\n")
                fh.write(f"# modality={doc['modality']}\n")
                fh.write(f"# curve={json.dumps(doc['curve'])}\n")
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(CSV_HEADER)
                for g in doc["grid"]:
                    w.writerow(["grid", g["dx"], g["dy"], repr(g["mr"]) if g["mr"] != NO_GT else NO_GT, "", "", ""])
                for k, v in doc["directions"].items():
                    w.writerow(["direction", "", "", "", k, repr(v["mu"]), repr(v["sigma"])])
            else:
                raise ValueError(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write report {os.fspath(path)}: {exc}") from exc


def read_report(path) -> Report:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if text.startswith("#"):
        meta = {}
        rows = []
        for line in text.splitlines():
            if line.startswith("# "):
                k, _, v = line[2:].partition("=")
                meta[k] = v
            elif line:
                rows.append(line)
        if meta.get("schema") != REPORT_SCHEMA:
            raise ValueError(f"report schema {meta.get('schema')!r}, expected {REPORT_SCHEMA!r}")
        reader = csv.DictReader(io.StringIO("\n".join(rows)))
        grid, dirs = {}, {}
        for r in reader:
            if r["kind"] == "grid":
                grid[(int(r["dx"]), int(r["dy"]))] = _mr_value(r["mr"])
            elif r["kind"] == "direction":
                dirs[r["direction"]] = (float(r["mu"]), float(r["sigma"]))
        return Report(_mr_value(json.loads(meta["mr"])), [tuple(p) for p in json.loads(meta["curve"])],
                      grid, dirs, meta.get("modality", "reference"))
    return document_to_report(json.loads(text))
