"""Paired per-modality pedestrian annotations.

Every pedestrian carries one unique index and up to two boxes: one in the
reference modality and one in the sensed modality.  Objects visible in a
single modality keep that one box and ``paired=False``.

File layout (UTF-8 JSON)::

    {"frames": [{"frame_id": str, "image_size": [w, h],
                 "objects": [{"uid": int, "reference_box": [x, y, w, h] | null,
                              "sensed_box": [x, y, w, h] | null,
                              "occluded": bool, "paired": bool}]}]}

``"ignore": true`` may appear on objects marked by :func:`reasonable_filter`.
Detections are stored as JSON lines, one
``{"frame_id", "box", "score", "modality"}`` record per line.
"""
from __future__ import annotations

import json
import math
import os
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .geom import Box

MODALITIES = ("reference", "sensed")


class AnnotationError(ValueError):
    """Malformed or inconsistent annotation/detection data."""

    def __init__(self, message: str, diagnostics: Sequence["Diagnostic"] = ()):
        super().__init__(message)
        self.diagnostics = list(diagnostics)


@dataclass(frozen=True)
class Diagnostic:
    message: str
    frame_id: Optional[str] = None
    uid: Optional[int] = None

    def __str__(self) -> str:
        where = []
        if self.frame_id is not None:
            where.append(f"frame={self.frame_id}")
        if self.uid is not None:
            where.append(f"uid={self.uid}")
        return f"[{' '.join(where)}] {self.message}" if where else self.message


@dataclass(frozen=True)
class PairedObject:
    uid: int
    reference_box: Optional[Box]
    sensed_box: Optional[Box]
    occluded: bool = False
    paired: Optional[bool] = None
    ignore: bool = False

    def __post_init__(self):
        both = self.reference_box is not None and self.sensed_box is not None
        if self.reference_box is None and self.sensed_box is None:
            raise AnnotationError(f"object uid={self.uid} has no box in either modality")
        if self.paired is None:
            object.__setattr__(self, "paired", both)
        elif self.paired != both:
            raise AnnotationError(f"object uid={self.uid}: paired={self.paired} but "
                                  f"{'both' if both else 'one'} box(es) present")

    def box(self, modality: str) -> Optional[Box]:
        if modality == "reference":
            return self.reference_box
        if modality == "sensed":
            return self.sensed_box
        raise ValueError(f"unknown modality {modality!r}")

    @property
    def any_box(self) -> Box:
        return self.reference_box if self.reference_box is not None else self.sensed_box


@dataclass(frozen=True)
class FrameAnnotation:
    frame_id: str
    image_size: tuple[int, int]
    objects: tuple[PairedObject, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "image_size", tuple(self.image_size))


@dataclass(frozen=True)
class Detection:
    frame_id: str
    box: Box
    score: float
    modality: str = "reference"

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite detection score {self.score}")


# -- serialization ------------------------------------------------------------

def _box_to_json(box: Optional[Box]):
    return None if box is None else box.as_list()


def frames_to_document(frames: Iterable[FrameAnnotation]) -> dict:
    out = []
    for fr in frames:
        objs = []
        for o in fr.objects:
            rec = {"uid": o.uid, "reference_box": _box_to_json(o.reference_box),
                   "sensed_box": _box_to_json(o.sensed_box), "occluded": o.occluded,
                   "paired": o.paired}
            if o.ignore:
                rec["ignore"] = True
            objs.append(rec)
        out.append({"frame_id": fr.frame_id, "image_size": list(fr.image_size), "objects": objs})
    return {"frames": out}


def save_annotations(frames: Iterable[FrameAnnotation], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(frames_to_document(frames), fh, indent=1)
        fh.write("\n")


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def validate_document(doc) -> list[Diagnostic]:
    """Schema, uid-uniqueness and pairing checks on a parsed document."""
    diags: list[Diagnostic] = []
    if not isinstance(doc, dict) or not isinstance(doc.get("frames"), list):
        return [Diagnostic("top level must be an object with a 'frames' list")]
    seen: dict[int, list[str]] = defaultdict(list)
    for fi, fr in enumerate(doc["frames"]):
        if not isinstance(fr, dict):
            diags.append(Diagnostic(f"frames[{fi}] is not an object"))
            continue
        fid = fr.get("frame_id")
        if not isinstance(fid, str):
            diags.append(Diagnostic(f"frames[{fi}].frame_id must be a string"))
            fid = f"#{fi}"
        size = fr.get("image_size")
        if not (isinstance(size, list) and len(size) == 2 and all(_is_num(v) and v > 0 for v in size)):
            diags.append(Diagnostic(f"frames[{fi}].image_size must be [w, h] > 0", fid))
            size = None
        objs = fr.get("objects")
        if not isinstance(objs, list):
            diags.append(Diagnostic(f"frames[{fi}].objects must be a list", fid))
            continue
        for oi, o in enumerate(objs):
            where = f"frames[{fi}].objects[{oi}]"
            if not isinstance(o, dict):
                diags.append(Diagnostic(f"{where} is not an object", fid))
                continue
            uid = o.get("uid")
            if not isinstance(uid, int) or isinstance(uid, bool):
                diags.append(Diagnostic(f"{where}.uid must be an integer", fid))
                uid = None
            else:
                seen[uid].append(fid)
            boxes = {}
            for key in ("reference_box", "sensed_box"):
                b = o.get(key)
                if b is None:
                    boxes[key] = None
                elif isinstance(b, list) and len(b) == 4 and all(_is_num(v) for v in b) and b[2] > 0 and b[3] > 0:
                    boxes[key] = b
                    if size is not None and (b[0] + b[2] <= 0 or b[1] + b[3] <= 0
                                             or b[0] >= size[0] or b[1] >= size[1]):
                        diags.append(Diagnostic(f"{where}.{key} lies outside the image", fid, uid))
                else:
                    diags.append(Diagnostic(f"{where}.{key} must be [x, y, w, h] with w, h > 0 or null", fid, uid))
                    boxes[key] = "bad"
            for key in ("occluded", "paired"):
                if not isinstance(o.get(key), bool):
                    diags.append(Diagnostic(f"{where}.{key} must be a boolean", fid, uid))
            if "ignore" in o and not isinstance(o["ignore"], bool):
                diags.append(Diagnostic(f"{where}.ignore must be a boolean", fid, uid))
            present = [v is not None for v in boxes.values()]
            if not any(present):
                diags.append(Diagnostic(f"{where} has no box in either modality", fid, uid))
            elif isinstance(o.get("paired"), bool) and o["paired"] != all(present):
                missing = [k for k, v in boxes.items() if v is None]
                detail = f"{', '.join(missing)} is null" if missing else "both boxes present"
                diags.append(Diagnostic(f"{where}: paired={str(o['paired']).lower()} but {detail}", fid, uid))
    for uid, fids in seen.items():
        if len(fids) > 1:
            diags.append(Diagnostic(f"duplicate uid {uid} in frames {', '.join(fids)}", None, uid))
    return diags


def document_to_frames(doc) -> list[FrameAnnotation]:
    diags = validate_document(doc)
    if diags:
        raise AnnotationError("; ".join(str(d) for d in diags), diags)
    frames = []
    for fr in doc["frames"]:
        objs = []
        for o in fr["objects"]:
            rb, sb = o["reference_box"], o["sensed_box"]
            objs.append(PairedObject(o["uid"], None if rb is None else Box(*rb),
                                     None if sb is None else Box(*sb),
                                     o["occluded"], o["paired"], o.get("ignore", False)))
        frames.append(FrameAnnotation(fr["frame_id"], tuple(fr["image_size"]), tuple(objs)))
    return frames


def read_document(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def load_annotations(path) -> list[FrameAnnotation]:
    return document_to_frames(read_document(path))


def save_detections(detections: Iterable[Detection], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in detections:
            fh.write(json.dumps({"frame_id": d.frame_id, "box": d.box.as_list(),
                                 "score": d.score, "modality": d.modality}) + "\n")


def load_detections(path) -> list[Detection]:
    dets = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                dets.append(Detection(rec["frame_id"], Box(*rec["box"]), float(rec["score"]),
                                      rec.get("modality", "reference")))
            except (ValueError, KeyError, TypeError) as exc:
                raise AnnotationError(f"{os.fspath(path)}: line {lineno}: bad detection record ({exc})") from exc
    return dets


# -- queries ------------------------------------------------------------------

@dataclass
class ShiftStatistics:
    histogram: list[int]  # counts over unit bins [k, k+1) px
    mean_x: float
    std_x: float
    mean_y: float
    std_y: float
    n_paired: int
    n_unpaired: int
    distances: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    @property
    def unpaired_fraction(self) -> float:
        total = self.n_paired + self.n_unpaired
        return self.n_unpaired / total if total else 0.0


def shift_statistics(frames: Iterable[FrameAnnotation]) -> ShiftStatistics:
    dxy = []
    n_unpaired = 0
    for fr in frames:
        for o in fr.objects:
            if not o.paired:
                n_unpaired += 1
                continue
            r, s = o.reference_box, o.sensed_box
            dxy.append((s.center_x - r.center_x, s.center_y - r.center_y))
    d = np.array(dxy, dtype=np.float64).reshape(-1, 2)
    dist = np.hypot(d[:, 0], d[:, 1])
    nbins = int(np.floor(dist.max())) + 1 if len(dist) else 0
    hist = np.bincount(np.floor(dist).astype(np.int64), minlength=nbins).tolist() if len(dist) else []
    if len(d):
        mean, std = d.mean(axis=0), d.std(axis=0)
    else:
        mean = std = np.zeros(2)
    return ShiftStatistics(hist, float(mean[0]), float(std[0]), float(mean[1]), float(std[1]),
                           len(d), n_unpaired, dist)


def reasonable_filter(frames: Iterable[FrameAnnotation], min_height: float = 55.0,
                      allow_occluded: bool = False) -> list[FrameAnnotation]:
    if min_height <= 0:
        raise ValueError("min_height must be positive")
    out = []
    for fr in frames:
        objs = []
        for o in fr.objects:
            too_small = o.any_box.height < min_height
            objs.append(replace(o, ignore=too_small or (o.occluded and not allow_occluded)))
        out.append(replace(fr, objects=tuple(objs)))
    return out


def shift_all_sensed(frames: Iterable[FrameAnnotation], dx: float, dy: float) -> list[FrameAnnotation]:
    out = []
    for fr in frames:
        objs = tuple(o if o.sensed_box is None else replace(o, sensed_box=o.sensed_box.translate(dx, dy))
                     for o in fr.objects)
        out.append(replace(fr, objects=objs))
    return out
