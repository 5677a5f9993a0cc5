"""Synthetic weakly aligned two-modality scenes and the SGD training loop."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import geom
from .annot import FrameAnnotation, PairedObject, load_annotations, save_annotations
from .detector import (Batch, Detector, ProposalConfig, aggregate_proposals_array, scripted_proposals,
                       trainable_names)
from .geom import Box

log = logging.getLogger(__name__)

DATASET_FORMAT = "arcnn-dataset/1"


@dataclass
class SceneConfig:
    image_size: tuple = (192, 144)
    objects_per_frame: tuple = (2, 4)
    object_height: tuple = (48.0, 72.0)
    aspect: float = 0.45
    shift_mean: tuple = (0.0, 0.0)
    shift_std: tuple = (0.0, 0.0)
    unpaired_rate: float = 0.0
    day_night_mix: float = 0.0
    occlusion_rate: float = 0.0
    clutter_per_frame: tuple = (1, 3)
    distractors_per_frame: tuple = (1, 2)
    thermal_blur: float = 2.0
    margin: float = 12.0
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        for name in ("objects_per_frame", "object_height", "shift_mean", "shift_std", "clutter_per_frame",
                     "distractors_per_frame"):
            setattr(self, name, tuple(getattr(self, name)))
        for name in ("unpaired_rate", "day_night_mix", "occlusion_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability, got {v}")
        if min(self.object_height) <= 0 or min(self.image_size) <= 0 or self.aspect <= 0:
            raise ValueError("sizes must be positive")
        if min(self.shift_std) < 0:
            raise ValueError("shift_std must be >= 0")


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 3
    decay_epochs: int = 2  # lr is multiplied by 0.1 from this epoch on
    batch_rois: int = 64
    positive_fraction: float = 0.25
    jitter_sigma: tuple = (0.05, 0.05)
    lam: float = 1.0
    conf_weight: float = 1.0
    enable_rfa: bool = True
    enable_jitter: bool = True
    fusion_mode: str = "caf"

    def __post_init__(self):
        self.jitter_sigma = tuple(self.jitter_sigma)
        if self.learning_rate < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("invalid optimizer settings")
        if self.batch_rois < 1 or not 0 < self.positive_fraction <= 1:
            raise ValueError("invalid sampling settings")
        if min(self.jitter_sigma) < 0:
            raise ValueError("jitter sigma must be >= 0")
        if self.fusion_mode not in ("caf", "naive"):
            raise ValueError(f"fusion_mode must be 'caf' or 'naive', got {self.fusion_mode!r}")
        if self.enable_jitter and not self.enable_rfa:
            raise ValueError("RoI jitter perturbs alignment targets and needs enable_rfa")


def config_from_dict(cls, data: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


# -- scene rendering ------------------------------------------------------------------

def _smooth_field(rng, shape, cells=(6, 8)) -> np.ndarray:
    h, w = shape
    g = rng.uniform(0.0, 1.0, size=(cells[0] + 1, cells[1] + 1))
    ys = np.linspace(0, cells[0], h)
    xs = np.linspace(0, cells[1], w)
    y0 = np.minimum(ys.astype(int), cells[0] - 1)
    x0 = np.minimum(xs.astype(int), cells[1] - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = g[y0][:, x0]
    b = g[y0][:, x0 + 1]
    c = g[y0 + 1][:, x0]
    d = g[y0 + 1][:, x0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def _pedestrian_masks(box: Box, shape):
    """Soft head / torso / legs masks of a standing figure filling ``box``."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cx = box.center_x
    head_r = 0.11 * box.height
    head_cy = box.y_min + head_r
    head = (xx - cx) ** 2 + (yy - head_cy) ** 2 <= head_r ** 2
    torso_top = box.y_min + 2 * head_r
    torso_bot = box.y_min + 0.6 * box.height
    torso = ((((xx - cx) / (0.5 * box.width)) ** 2 + ((yy - (torso_top + torso_bot) / 2)
                                                         / ((torso_bot - torso_top) / 2)) ** 2) <= 1.0)
    legs = ((np.abs(np.abs(xx - cx) - 0.2 * box.width) <= 0.12 * box.width)
            & (yy >= torso_bot - 2) & (yy <= box.y_max))
    return head, torso, legs


def _paint(img: np.ndarray, mask: np.ndarray, color) -> None:
    for ch in range(img.shape[0]):
        img[ch][mask] = color[ch]


def _place_boxes(cfg: SceneConfig, rng, n: int, avoid: Sequence[Box] = ()) -> list[Box]:
    w_img, h_img = cfg.image_size
    boxes: list[Box] = []
    taken = list(avoid)
    for _ in range(n):
        for _attempt in range(50):
            h = rng.uniform(*cfg.object_height)
            w = h * cfg.aspect
            x = rng.uniform(cfg.margin, w_img - cfg.margin - w)
            y = rng.uniform(cfg.margin, h_img - cfg.margin - h)
            b = Box(float(x), float(y), float(w), float(h))
            if all(geom.iou(b, o) < 0.05 for o in taken):
                boxes.append(b)
                taken.append(b)
                break
    return boxes


def _place_distractors(cfg: SceneConfig, rng, n: int, people: Sequence[Box]) -> list[Box]:
    """Warm non-pedestrians standing beside a pedestrian.

    Each overlaps its neighbour with IoU in [0.15, 0.4], so proposals on it
    fall in the 0.1-0.5 negative band and are seen in training.
    """
    w_img, h_img = cfg.image_size
    out: list[Box] = []
    if not people:
        return out
    for _ in range(n):
        for _attempt in range(50):
            p = people[int(rng.integers(0, len(people)))]
            u = rng.uniform(0.15, 0.4)
            h = p.height * rng.uniform(0.9, 1.1)
            w = h * cfg.aspect
            side = 1.0 if rng.uniform() < 0.5 else -1.0
            cx = p.center_x + side * p.width * (1.0 - u) / (1.0 + u)
            cy = p.center_y + rng.uniform(-0.1, 0.1) * p.height
            b = Box.from_center(float(cx), float(cy), float(w), float(h))
            if b.x_min < 0 or b.y_min < 0 or b.x_max > w_img or b.y_max > h_img:
                continue
            if all(geom.iou(b, q) <= 0.45 for q in people) and all(geom.iou(b, q) < 0.05 for q in out):
                out.append(b)
                break
    return out


def pair_object(config: SceneConfig, rng: np.random.Generator, rbox: Box):
    """Draw the sensed box, which modalities show the object, and occlusion.

    Returns ``(sensed_box, in_reference, in_sensed, occluded)``.
    """
    d = rng.normal(config.shift_mean, np.maximum(config.shift_std, 0.0)) if max(config.shift_std) > 0 \
        else np.array(config.shift_mean, dtype=np.float64)
    sbox = rbox.translate(float(d[0]), float(d[1]))
    in_ref = in_sen = True
    if rng.uniform() < config.unpaired_rate:
        if rng.uniform() < 0.5:
            in_sen = False
        else:
            in_ref = False
    occluded = bool(rng.uniform() < config.occlusion_rate)
    return sbox, in_ref, in_sen, occluded


def generate_scene(config: SceneConfig, rng: np.random.Generator, frame_id: str = "000000",
                   uid_start: int = 0):
    """Render one reference/sensed image pair and its exact paired annotation.

    Images are ``(3, H, W)`` float64 on the 1/255 grid in ``[0, 1]``.
    """
    w_img, h_img = config.image_size
    shape = (h_img, w_img)
    n_obj = int(rng.integers(config.objects_per_frame[0], config.objects_per_frame[1] + 1))
    boxes = _place_boxes(config, rng, n_obj)
    night = rng.uniform() < config.day_night_mix

    ref = np.empty((3,) + shape)
    ref[:] = 0.18 + 0.18 * _smooth_field(rng, shape)
    sen = np.stack([0.25 + 0.45 * _smooth_field(rng, shape) for _ in range(3)])

    yy, xx = np.mgrid[0:h_img, 0:w_img]
    n_clutter = int(rng.integers(config.clutter_per_frame[0], config.clutter_per_frame[1] + 1))
    for _ in range(n_clutter):
        cw = rng.uniform(20, 60)
        ch = rng.uniform(12, 30)
        cx0 = rng.uniform(0, w_img - cw)
        cy0 = rng.uniform(0, h_img - ch)
        m = (xx >= cx0) & (xx < cx0 + cw) & (yy >= cy0) & (yy < cy0 + ch)
        _paint(ref, m, [rng.uniform(0.45, 0.7)] * 3)
        _paint(sen, m, rng.uniform(0.0, 1.0, size=3))

    # warm distractors: pedestrian silhouettes in the reference stream,
    # plain slabs in the sensed one
    n_warm = int(rng.integers(config.distractors_per_frame[0], config.distractors_per_frame[1] + 1))
    distractors = _place_distractors(config, rng, n_warm, boxes)
    for b in distractors:
        head, torso, legs = _pedestrian_masks(b, shape)
        _paint(ref, head | torso | legs, [rng.uniform(0.7, 0.9)] * 3)
        slab = (np.abs(xx - b.center_x) <= 0.4 * b.width) & (yy >= b.y_min) & (yy <= b.y_max)
        _paint(sen, slab, rng.uniform(0.0, 1.0, size=3))

    objects = []
    for i, rbox in enumerate(boxes):
        sbox, in_ref, in_sen, occluded = pair_object(config, rng, rbox)
        heat = rng.uniform(0.7, 0.9)
        cloth = rng.uniform(0.0, 1.0, size=3)
        skin = np.array([0.85, 0.65, 0.5]) * rng.uniform(0.7, 1.0)
        trousers = rng.uniform(0.0, 0.35, size=3)
        if in_ref:
            head, torso, legs = _pedestrian_masks(rbox, shape)
            _paint(ref, head | torso | legs, [heat] * 3)
        if in_sen:
            head, torso, legs = _pedestrian_masks(sbox, shape)
            _paint(sen, torso, cloth)
            _paint(sen, legs, trousers)
            _paint(sen, head, skin)
        if occluded:
            for img, b in ((ref, rbox), (sen, sbox)):
                yy, xx = np.mgrid[0:h_img, 0:w_img]
                m = ((xx >= b.x_min - 4) & (xx < b.x_max + 4) & (yy >= b.y_min + 0.55 * b.height)
                     & (yy < b.y_max + 2))
                _paint(img, m, img[:, int(min(h_img - 1, b.y_max + 3)), int(max(0, b.x_min - 6))])
        objects.append(PairedObject(uid_start + i, rbox if in_ref else None, sbox if in_sen else None,
                                    occluded))

    ref = gaussian_filter(ref, sigma=(0, config.thermal_blur, config.thermal_blur))
    ref += rng.normal(0.0, 0.05, size=(1,) + shape)
    sen += rng.normal(0.0, 0.05, size=sen.shape)
    if night:
        sen = 0.12 * sen + rng.normal(0.0, 0.04, size=sen.shape)
    ref = np.round(np.clip(ref, 0.0, 1.0) * 255.0) / 255.0
    sen = np.round(np.clip(sen, 0.0, 1.0) * 255.0) / 255.0
    frame = FrameAnnotation(frame_id, (w_img, h_img), tuple(objects))
    return ref, sen, frame, geom.boxes_to_array(distractors)


@dataclass
class Dataset:
    frames: list
    reference: np.ndarray  # (N, 3, H, W) uint8
    sensed: np.ndarray
    scene_config: Optional[SceneConfig] = None
    distractors: Optional[list] = None  # per frame (K, 4) boxes of warm non-pedestrians

    def __post_init__(self):
        if self.distractors is None:
            self.distractors = [np.zeros((0, 4)) for _ in self.frames]

    def __len__(self):
        return len(self.frames)

    def images(self, i: int):
        return self.reference[i].astype(np.float64) / 255.0, self.sensed[i].astype(np.float64) / 255.0

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = list(indices)
        return Dataset([self.frames[i] for i in idx], self.reference[idx], self.sensed[idx], self.scene_config,
                       [self.distractors[i] for i in idx])


def frame_rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def generate_dataset(config: SceneConfig, n_frames: int) -> Dataset:
    """Independent per-frame rng streams derived from ``config.seed``."""
    frames, refs, sens, extra = [], [], [], []
    uid = 0
    for i, rng in enumerate(frame_rngs(config.seed, n_frames)):
        r, s, fr, dis = generate_scene(config, rng, f"{i:06d}", uid)
        extra.append(dis)
        uid += len(fr.objects)
        frames.append(fr)
        refs.append(np.round(r * 255).astype(np.uint8))
        sens.append(np.round(s * 255).astype(np.uint8))
    w, h = config.image_size
    empty = np.zeros((0, 3, h, w), dtype=np.uint8)
    return Dataset(frames, np.stack(refs) if refs else empty, np.stack(sens) if sens else empty, config, extra)


def save_dataset(ds: Dataset, out_dir) -> list[str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_annotations(ds.frames, out / "annotations.json")
    np.save(out / "reference.npy", ds.reference)
    np.save(out / "sensed.npy", ds.sensed)
    with open(out / "distractors.json", "w", encoding="utf-8") as fh:
        json.dump([d.tolist() for d in ds.distractors], fh)
        fh.write("\n")
    manifest = {"format": DATASET_FORMAT, "n_frames": len(ds),
                "files": {"annotations": "annotations.json", "reference": "reference.npy", "sensed": "sensed.npy",
                          "distractors": "distractors.json"},
                "scene_config": asdict(ds.scene_config) if ds.scene_config else None}
    with open(out / "dataset.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return [str(out / n) for n in ("annotations.json", "reference.npy", "sensed.npy", "distractors.json",
                                   "dataset.json")]


def load_dataset(path) -> Dataset:
    p = Path(path)
    with open(p / "dataset.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"{p}: dataset format {manifest.get('format')!r}, expected {DATASET_FORMAT!r}")
    files = manifest["files"]
    frames = load_annotations(p / files["annotations"])
    ref = np.load(p / files["reference"])
    sen = np.load(p / files["sensed"])
    if not (len(frames) == len(ref) == len(sen)):
        raise ValueError(f"{p}: annotation/image counts disagree")
    distractors = None
    if "distractors" in files:
        with open(p / files["distractors"], encoding="utf-8") as fh:
            distractors = [np.array(d, dtype=np.float64).reshape(-1, 4) for d in json.load(fh)]
    sc = manifest.get("scene_config")
    return Dataset(frames, ref, sen, SceneConfig(**sc) if sc else None, distractors)


# -- mini-batch sampling and RoI jitter ------------------------------------------------

def sample_minibatch(proposals: np.ndarray, frame: FrameAnnotation, config: TrainConfig,
                     rng: np.random.Generator) -> Batch:
    """Label RoIs against reference boxes: positive if IoU > 0.5, negative if 0.1 <= IoU <= 0.5."""
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    if len(proposals) == 0:
        raise ValueError("sample_minibatch needs proposals")
    objs = [o for o in frame.objects if o.reference_box is not None]
    gt = geom.boxes_to_array([o.reference_box for o in objs])
    if len(gt):
        ious = geom.iou_matrix(proposals, gt)
        best = ious.max(axis=1)
        arg = ious.argmax(axis=1)
    else:
        best = np.zeros(len(proposals))
        arg = np.zeros(len(proposals), dtype=np.int64)
    pos_idx = np.flatnonzero(best > 0.5)
    neg_idx = np.flatnonzero((best >= 0.1) & (best <= 0.5))
    n_pos = min(len(pos_idx), int(np.floor(config.batch_rois * config.positive_fraction)))
    n_neg = min(len(neg_idx), config.batch_rois - n_pos)
    pos_idx = rng.choice(pos_idx, size=n_pos, replace=False) if n_pos else pos_idx[:0]
    neg_idx = rng.choice(neg_idx, size=n_neg, replace=False) if n_neg else neg_idx[:0]
    warning = "no eligible negatives; positives-only batch" if len(neg_idx) == 0 else None
    idx = np.concatenate([pos_idx, neg_idx]).astype(np.int64)
    rois = proposals[idx]
    labels = np.concatenate([np.ones(n_pos, dtype=np.int64), np.zeros(len(neg_idx), dtype=np.int64)])
    shift_t = np.zeros((len(idx), 2))
    shift_m = np.zeros(len(idx), dtype=bool)
    reg_t = np.zeros((len(idx), 4))
    for k in range(n_pos):
        o = objs[arg[idx[k]]]
        reg_t[k] = geom.encode_deltas(rois[k:k + 1], gt[arg[idx[k]]][None])[0]
        if o.paired:
            s = geom.encode_shift(o.reference_box, o.sensed_box)
            shift_t[k] = (s.t_x, s.t_y)
            shift_m[k] = True
    return Batch(rois, rois.copy(), labels, shift_t, shift_m, reg_t, warning)


def apply_roi_jitter(batch: Batch, sigma, rng: np.random.Generator) -> Batch:
    """Jitter every sensed RoI and move its shift target by the opposite amount.

    The jittered box keeps its size, so ``apply_shift(jittered, new_target)``
    lands where ``apply_shift(original, old_target)`` did.
    """
    sx, sy = sigma
    if sx < 0 or sy < 0:
        raise ValueError("jitter sigma must be >= 0")
    n = len(batch)
    tj = rng.normal(0.0, 1.0, size=(n, 2)) * np.array([sx, sy])
    return replace(batch, sensed_rois=geom.apply_shift_array(batch.sensed_rois, tj),
                   shift_targets=batch.shift_targets - tj)


# -- training -------------------------------------------------------------------------

class TrainingError(RuntimeError):
    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


@dataclass
class TrainResult:
    params: dict
    trace: list = field(default_factory=list)
    components: list = field(default_factory=list)


def training_proposals(frame: FrameAnnotation, rng, proposal_cfg: ProposalConfig = ProposalConfig(),
                       salient=None):
    br, sr, bs, ss = scripted_proposals(frame, rng, proposal_cfg, salient)
    props, _ = aggregate_proposals_array(br, sr, bs, ss, proposal_cfg.nms_threshold)
    gt = geom.boxes_to_array([o.reference_box for o in frame.objects if o.reference_box is not None])
    return np.concatenate([gt, props]) if len(gt) else props


def train(detector: Detector, dataset: Dataset, config: TrainConfig, seed: int,
          proposal_cfg: ProposalConfig = ProposalConfig(), max_iterations: Optional[int] = None,
          progress=None) -> TrainResult:
    """SGD with momentum and weight decay; deterministic for a given seed.

    The model's RFA / fusion switches must match ``config``.
    """
    if len(dataset) == 0:
        raise ValueError("training needs a non-empty dataset")
    mc = detector.config
    if mc.enable_rfa != config.enable_rfa or mc.fusion_mode != config.fusion_mode:
        raise ValueError("detector configuration disagrees with TrainConfig switches")
    rng = np.random.default_rng(seed)
    params = detector.params
    names = trainable_names(params)
    velocity = {k: np.zeros_like(params[k]) for k in names}
    feats = [detector.features(*dataset.images(i)) for i in range(len(dataset))]
    result = TrainResult(params)
    it = 0
    for epoch in range(config.epochs):
        lr = config.learning_rate * (0.1 if epoch >= config.decay_epochs else 1.0)
        for fi in rng.permutation(len(dataset)):
            if max_iterations is not None and it >= max_iterations:
                return result
            frame = dataset.frames[fi]
            props = training_proposals(frame, rng, proposal_cfg, dataset.distractors[fi])
            batch = sample_minibatch(props, frame, config, rng)
            if len(batch) == 0:
                continue
            if config.enable_jitter:
                batch = apply_roi_jitter(batch, config.jitter_sigma, rng)
            try:
                loss, grads = detector.loss_and_grads(feats[fi], batch, config.lam, config.conf_weight)
            except FloatingPointError as exc:
                raise TrainingError(f"non-finite loss at iteration {it}: {exc}", it) from exc
            for k in names:
                g = grads[k] + config.weight_decay * params[k]
                velocity[k] *= config.momentum
                velocity[k] -= lr * g
                params[k] += velocity[k]
            result.trace.append(loss.total)
            result.components.append((loss.cls, loss.shift, loss.reg))
            if progress is not None:
                progress(epoch, it, loss)
            it += 1
    return result


def train_single_sample(detector: Detector, feats, batch: Batch, config: TrainConfig, iterations: int) -> list:
    """Repeated SGD steps on one fixed batch (overfitting smoke test)."""
    params = detector.params
    names = trainable_names(params)
    velocity = {k: np.zeros_like(params[k]) for k in names}
    trace = []
    for _ in range(iterations):
        loss, grads = detector.loss_and_grads(feats, batch, config.lam, config.conf_weight)
        trace.append(loss.total)
        for k in names:
            velocity[k] *= config.momentum
            velocity[k] -= config.learning_rate * (grads[k] + config.weight_decay * params[k])
            params[k] += velocity[k]
    return trace
