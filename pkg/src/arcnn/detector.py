"""Two-stream region detector with region feature alignment and confidence-aware fusion.

The reference stream anchors labels and localization.  For every proposal
the sensed stream is pooled at a context-enlarged region, a small FC head
predicts the sensed offset, and the sensed map is re-pooled at the shifted
region.  Per-modality confidence branches then re-weight the two region
features before the detection head.

The backbone is a frozen random convolution stack; every FC head is
trainable and has an exact hand-written gradient, including the path from
the predicted shift through the re-pooling coordinates.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import geom
from .geom import Box, ShiftTarget
from .tensornet import (FcLayer, avg_pool2, check_finite, conv2d_same, fc_backward, fc_forward,
                        log_softmax2, relu, roi_align_batch, smooth_l1, smooth_l1_grad, softmax2)

CHECKPOINT_FORMAT = "arcnn-ckpt/1"
FUSION_MODES = ("caf", "naive")


@dataclass
class ModelConfig:
    in_channels: int = 3
    conv_channels: tuple = (8, 16, 16)
    stride: int = 4
    pool_size: int = 7
    samples_per_bin: int = 2
    context_factor: float = 1.5
    rfa_hidden: int = 256
    conf_hidden: int = 64
    det_hidden: int = 128
    enable_rfa: bool = True
    fusion_mode: str = "caf"
    # False: the shift head learns from the shift loss only and the re-pooled
    # region is a constant for the detection loss, as with standard RoIAlign
    repool_grad: bool = False

    def __post_init__(self):
        self.conv_channels = tuple(self.conv_channels)
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if len(self.conv_channels) != 3:
            raise ValueError("backbone has exactly three conv layers")

    @property
    def feat_channels(self) -> int:
        return self.conv_channels[-1]

    @property
    def region_dim(self) -> int:
        return self.feat_channels * self.pool_size * self.pool_size


@dataclass
class TwoStreamFeatures:
    reference: np.ndarray  # (C, H, W)
    sensed: np.ndarray
    stride: int
    image_size: tuple  # (width, height) in pixels

    def __post_init__(self):
        if self.reference.shape != self.sensed.shape:
            raise ValueError(f"stream shapes differ: {self.reference.shape} vs {self.sensed.shape}")


@dataclass
class RfaHead:
    fc1: FcLayer
    fc2: FcLayer

    def __post_init__(self):
        if self.fc2.n_out != 2:
            raise ValueError("RFA head must output exactly (t_x, t_y)")


@dataclass
class ConfidenceBranch:
    fc1: FcLayer
    fc2: FcLayer

    def __post_init__(self):
        if self.fc2.n_out != 2:
            raise ValueError("confidence branch outputs two logits")


@dataclass
class DetectHead:
    fc1: FcLayer
    fc2: FcLayer  # 2 class logits + 4 box deltas


# -- parameters ------------------------------------------------------------------

def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Named float64 parameter tensors; backbone kernels are He-normal and bias-free."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    chans = (config.in_channels,) + config.conv_channels
    for stream in ("reference", "sensed"):
        for i in range(3):
            fan_in = chans[i] * 9
            params[f"backbone.{stream}.conv{i + 1}"] = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                                                  size=(chans[i + 1], chans[i], 3, 3))
        # frozen per-channel output normalization, set by calibrate_backbone
        params[f"backbone.{stream}.mean"] = np.zeros(chans[-1])
        params[f"backbone.{stream}.scale"] = np.ones(chans[-1])
    d = config.region_dim

    def fc(name, n_in, n_out, std=None):
        layer = FcLayer.init(n_in, n_out, rng, std)
        params[f"{name}.weight"] = layer.weights
        params[f"{name}.bias"] = layer.bias

    fc("rfa.fc1", 2 * d, config.rfa_hidden)
    fc("rfa.fc2", config.rfa_hidden, 2, std=1e-3)
    for m in ("reference", "sensed"):
        fc(f"conf.{m}.fc1", d, config.conf_hidden)
        fc(f"conf.{m}.fc2", config.conf_hidden, 2, std=1e-2)
        # background prior p1 = 0.1, so fusion weights start near 0.8 instead of 0
        params[f"conf.{m}.fc2.bias"] = np.array([0.5, -0.5]) * np.log(9.0)
    fc("det.fc1", 2 * d, config.det_hidden)
    fc("det.fc2", config.det_hidden, 6, std=1e-2)
    return params


def trainable_names(params: dict) -> list[str]:
    return [k for k in params if not k.startswith("backbone.")]


def _layer(params, name) -> FcLayer:
    return FcLayer(params[f"{name}.weight"], params[f"{name}.bias"])


def rfa_head(params) -> RfaHead:
    return RfaHead(_layer(params, "rfa.fc1"), _layer(params, "rfa.fc2"))


def confidence_branches(params) -> dict[str, ConfidenceBranch]:
    return {m: ConfidenceBranch(_layer(params, f"conf.{m}.fc1"), _layer(params, f"conf.{m}.fc2"))
            for m in ("reference", "sensed")}


def detect_head_of(params) -> DetectHead:
    return DetectHead(_layer(params, "det.fc1"), _layer(params, "det.fc2"))


# -- checkpoints -------------------------------------------------------------------

_MAGIC = b"ARCNNCK1"


def save_checkpoint(path, params: dict, config: ModelConfig, extra: Optional[dict] = None) -> None:
    """Header JSON followed by little-endian float64 data, in sorted name order."""
    names = sorted(params)
    header = {"format": CHECKPOINT_FORMAT, "model_config": asdict(config),
              "params": [{"name": n, "shape": list(params[n].shape)} for n in names],
              "extra": extra or {}}
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hdr)))
        fh.write(hdr)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, ModelConfig, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _MAGIC:
        raise ValueError(f"{path}: not an arcnn checkpoint")
    (n,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + n].decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: checkpoint format {header.get('format')!r}, expected {CHECKPOINT_FORMAT!r}")
    buf = io.BytesIO(blob[16 + n:])
    params = {}
    for rec in header["params"]:
        shape = tuple(rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        params[rec["name"]] = np.frombuffer(buf.read(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    return params, ModelConfig(**header["model_config"]), header.get("extra", {})


def params_digest(params: dict) -> str:
    h = hashlib.sha256()
    for n in sorted(params):
        h.update(n.encode())
        h.update(np.ascontiguousarray(params[n], dtype="<f8").tobytes())
    return h.hexdigest()


# -- backbone and proposals ------------------------------------------------------

def _backbone(image: np.ndarray, kernels: Sequence[np.ndarray]) -> np.ndarray:
    x = relu(conv2d_same(image, kernels[0]))
    x = avg_pool2(x)
    x = relu(conv2d_same(x, kernels[1]))
    x = avg_pool2(x)
    return relu(conv2d_same(x, kernels[2]))


def _raw_features(image: np.ndarray, params: dict, stream: str) -> np.ndarray:
    return _backbone(np.asarray(image, dtype=np.float64), [params[f"backbone.{stream}.conv{i}"] for i in (1, 2, 3)])


def stream_features(image: np.ndarray, params: dict, stream: str) -> np.ndarray:
    f = _raw_features(image, params, stream)
    mean = params[f"backbone.{stream}.mean"][:, None, None]
    scale = params[f"backbone.{stream}.scale"][:, None, None]
    return (f - mean) * scale


def calibrate_backbone(params: dict, images: Sequence[tuple]) -> None:
    """Set each stream's frozen normalization to zero mean, unit variance per channel
    over ``(reference, sensed)`` image pairs.

    Nearly dead channels are scaled by at most ten times the widest channel's
    factor so rare activations (e.g. at zero-filled borders) stay bounded.
    """
    if len(images) == 0:
        raise ValueError("calibration needs at least one image pair")
    for k, stream in enumerate(("reference", "sensed")):
        feats = np.stack([_raw_features(pair[k], params, stream) for pair in images])
        mean = feats.mean(axis=(0, 2, 3))
        std = feats.std(axis=(0, 2, 3))
        params[f"backbone.{stream}.mean"] = mean
        params[f"backbone.{stream}.scale"] = 1.0 / np.maximum(std, 0.1 * std.max() + 1e-12)


def extract_features(reference_image: np.ndarray, sensed_image: np.ndarray, params: dict,
                     stride: int = 4) -> TwoStreamFeatures:
    """Run each stream through its own three-layer conv stack (total stride 4)."""
    if reference_image.shape != sensed_image.shape:
        raise ValueError(f"image shapes differ: {reference_image.shape} vs {sensed_image.shape}")
    ref = stream_features(reference_image, params, "reference")
    sen = stream_features(sensed_image, params, "sensed")
    h, w = reference_image.shape[1:]
    return TwoStreamFeatures(ref, sen, stride, (w, h))


def aggregate_proposals(ref_props, sensed_props, iou_threshold: float = 0.7):
    """Union of both scored proposal lists followed by NMS; returns kept ``(Box, score)``."""
    merged = list(ref_props) + list(sensed_props)
    keep = geom.nms(merged, iou_threshold)
    return [merged[i] for i in keep]


def aggregate_proposals_array(boxes_r, scores_r, boxes_s, scores_s, iou_threshold: float = 0.7):
    boxes = np.concatenate([np.reshape(boxes_r, (-1, 4)), np.reshape(boxes_s, (-1, 4))])
    scores = np.concatenate([np.ravel(scores_r), np.ravel(scores_s)])
    keep = geom.nms_array(boxes, scores, iou_threshold)
    return boxes[keep], scores[keep]


def perturb_boxes(boxes: np.ndarray, per_box: int, rng: np.random.Generator,
                  center_noise: float = 0.2, scale_range=(0.8, 1.25)) -> np.ndarray:
    """Scripted stand-in for an RPN: centers jittered uniformly by up to
    ``center_noise`` of the box size, sides scaled log-uniformly in ``scale_range``."""
    if len(boxes) == 0 or per_box == 0:
        return np.zeros((0, 4))
    b = np.repeat(np.asarray(boxes, dtype=np.float64), per_box, axis=0)
    c = b[:, :2] + b[:, 2:] / 2.0 + rng.uniform(-center_noise, center_noise, size=(len(b), 2)) * b[:, 2:]
    lo, hi = np.log(scale_range[0]), np.log(scale_range[1])
    wh = b[:, 2:] * np.exp(rng.uniform(lo, hi, size=(len(b), 2)))
    return np.concatenate([c - wh / 2.0, wh], axis=1)


def random_boxes(n: int, image_size, height_range, aspect: float, rng: np.random.Generator) -> np.ndarray:
    w_img, h_img = image_size
    h = rng.uniform(height_range[0], height_range[1], size=n)
    w = h * aspect
    x = rng.uniform(0, 1, size=n) * np.maximum(w_img - w, 1.0)
    y = rng.uniform(0, 1, size=n) * np.maximum(h_img - h, 1.0)
    return np.stack([x, y, w, h], axis=1)


@dataclass
class ProposalConfig:
    per_object: int = 8
    n_random: int = 24
    n_near: int = 16
    height_range: tuple = (44.0, 76.0)
    aspect: float = 0.45
    nms_threshold: float = 0.7


def scripted_proposals(frame, rng: np.random.Generator, cfg: ProposalConfig = ProposalConfig(),
                       salient: Optional[np.ndarray] = None):
    """Per-modality scored proposals for one annotated frame.

    Reference proposals come from reference boxes, sensed proposals from
    sensed boxes, both perturbed; negatives are drawn near objects and
    uniformly over the image.  ``salient`` boxes (unannotated objects an RPN
    would also fire on) are perturbed into both lists.  The number of draws
    does not depend on box positions, so a fixed rng yields the same noise
    under any shift.
    """
    ref_gt = geom.boxes_to_array([o.reference_box for o in frame.objects if o.reference_box is not None])
    sen_gt = geom.boxes_to_array([o.sensed_box for o in frame.objects if o.sensed_box is not None])
    pr = perturb_boxes(ref_gt, cfg.per_object, rng)
    ps = perturb_boxes(sen_gt, cfg.per_object, rng)
    sr = rng.uniform(0.5, 1.0, size=len(pr))
    ss = rng.uniform(0.5, 1.0, size=len(ps))
    sal = np.zeros((0, 4)) if salient is None else np.asarray(salient, dtype=np.float64).reshape(-1, 4)
    pv = perturb_boxes(sal, cfg.per_object, rng)
    sv = rng.uniform(0.5, 1.0, size=len(pv))
    anchors = np.concatenate([ref_gt, sen_gt]) if len(ref_gt) + len(sen_gt) else np.zeros((0, 4))
    near = np.zeros((0, 4))
    if len(anchors):
        pick = anchors[rng.integers(0, len(anchors), size=cfg.n_near)]
        ang = rng.uniform(0, 2 * np.pi, size=cfg.n_near)
        mag = rng.uniform(0.4, 1.0, size=cfg.n_near)
        off = np.stack([np.cos(ang), np.sin(ang)], axis=1) * mag[:, None] * pick[:, 2:]
        near = pick.copy()
        near[:, :2] += off
    rand = random_boxes(cfg.n_random, frame.image_size, cfg.height_range, cfg.aspect, rng)
    neg = np.concatenate([near, rand])
    sn = rng.uniform(0.0, 1.0, size=len(neg))
    half = len(pv) // 2
    boxes_r = np.concatenate([pr, pv[:half], neg[: len(neg) // 2]])
    scores_r = np.concatenate([sr, sv[:half], sn[: len(neg) // 2]])
    boxes_s = np.concatenate([ps, pv[half:], neg[len(neg) // 2:]])
    scores_s = np.concatenate([ss, sv[half:], sn[len(neg) // 2:]])
    return clip_boxes(boxes_r, frame.image_size), scores_r, clip_boxes(boxes_s, frame.image_size), scores_s


def clip_boxes(boxes: np.ndarray, image_size, min_size: float = 4.0) -> np.ndarray:
    """Clip to the image, keeping at least ``min_size`` px per side."""
    if len(boxes) == 0:
        return boxes
    w, h = image_size
    x0 = np.clip(boxes[:, 0], 0, w - min_size)
    y0 = np.clip(boxes[:, 1], 0, h - min_size)
    x1 = np.clip(boxes[:, 0] + boxes[:, 2], x0 + min_size, w)
    y1 = np.clip(boxes[:, 1] + boxes[:, 3], y0 + min_size, h)
    return np.stack([x0, y0, x1 - x0, y1 - y0], axis=1)


# -- region feature alignment -----------------------------------------------------

@dataclass
class RfaOutput:
    shifts: list  # ShiftTarget per proposal
    aligned_sensed: np.ndarray  # (N, C, P, P)
    reference: np.ndarray  # (N, C, P, P)


def rfa_forward(features: TwoStreamFeatures, proposals: Sequence[Box], head: RfaHead,
                context_factor: float = 1.5, pool_size: int = 7, samples_per_bin: int = 2) -> RfaOutput:
    if len(proposals) == 0:
        raise ValueError("rfa_forward needs at least one proposal")
    rois = geom.boxes_to_array(proposals)
    out = _rfa_arrays(features, rois, rois, head, context_factor, pool_size, samples_per_bin)
    shifts = [ShiftTarget(float(tx), float(ty)) for tx, ty in out["t"]]
    return RfaOutput(shifts, out["S"], out["R"])


def _rfa_arrays(features, rois, sensed_rois, head: RfaHead, context_factor, pool_size, spb,
                with_grad=False):
    inv = 1.0 / features.stride
    n = len(rois)
    ctx_r = geom.enlarge_context_array(rois, context_factor, features.image_size)
    ctx_s = geom.enlarge_context_array(sensed_rois, context_factor, features.image_size)
    a_r = roi_align_batch(features.reference, ctx_r * inv, pool_size, pool_size, spb)
    a_s = roi_align_batch(features.sensed, ctx_s * inv, pool_size, pool_size, spb)
    x = np.concatenate([a_r.reshape(n, -1), a_s.reshape(n, -1)], axis=1)
    h = fc_forward(head.fc1, x)
    a = relu(h)
    t = fc_forward(head.fc2, a)
    aligned = geom.apply_shift_array(sensed_rois, t)
    R = roi_align_batch(features.reference, rois * inv, pool_size, pool_size, spb)
    out = {"x": x, "h": h, "a": a, "t": t, "aligned": aligned, "R": R}
    if with_grad:
        S, dSx, dSy = roi_align_batch(features.sensed, aligned * inv, pool_size, pool_size, spb, with_grad=True)
        out.update(S=S, dSx=dSx, dSy=dSy)
    else:
        out["S"] = roi_align_batch(features.sensed, aligned * inv, pool_size, pool_size, spb)
    return out


# -- confidence-aware fusion --------------------------------------------------------

@dataclass
class ConfidenceWeights:
    w_r: np.ndarray
    w_s: np.ndarray
    w_d: np.ndarray
    p1_r: np.ndarray
    p1_s: np.ndarray


def _branch_forward(branch: ConfidenceBranch, feat: np.ndarray):
    h = fc_forward(branch.fc1, feat)
    a = relu(h)
    z = fc_forward(branch.fc2, a)
    return h, a, z


def weights_from_probs(p1_r, p1_s) -> ConfidenceWeights:
    p1_r = np.asarray(p1_r, dtype=np.float64)
    p1_s = np.asarray(p1_s, dtype=np.float64)
    w_r = np.abs(p1_r - (1.0 - p1_r))
    w_s = np.abs(p1_s - (1.0 - p1_s))
    w_d = 1.0 - np.abs(p1_r - p1_s)
    return ConfidenceWeights(w_r, w_s, w_d, p1_r, p1_s)


def confidence_weights(ref_feature: np.ndarray, sensed_feature: np.ndarray,
                       branches: dict[str, ConfidenceBranch]) -> ConfidenceWeights:
    """``W = |p1 - p0|`` per modality and ``W_d = 1 - |p1_r - p1_s|``; features are ``(N, D)`` or ``(D,)``."""
    ref = np.asarray(ref_feature, dtype=np.float64)
    sen = np.asarray(sensed_feature, dtype=np.float64)
    if ref.ndim > 1:
        ref, sen = ref.reshape(len(ref), -1), sen.reshape(len(sen), -1)
    _, _, z_r = _branch_forward(branches["reference"], ref)
    _, _, z_s = _branch_forward(branches["sensed"], sen)
    return weights_from_probs(softmax2(z_r)[1], softmax2(z_s)[1])


def fuse(ref_feature: np.ndarray, sensed_feature: np.ndarray, weights: Optional[ConfidenceWeights],
         mode: str = "caf") -> np.ndarray:
    """Channel concatenation, re-weighted in ``caf`` mode: reference by W_r, sensed by W_s*W_d.

    Features are ``(N, C, ...)``; the output is ``(N, 2C, ...)``.
    """
    ref = np.asarray(ref_feature, dtype=np.float64)
    sen = np.asarray(sensed_feature, dtype=np.float64)
    if ref.shape != sen.shape:
        raise ValueError(f"feature shapes differ: {ref.shape} vs {sen.shape}")
    if mode == "naive":
        return np.concatenate([ref, sen], axis=1)
    if mode != "caf":
        raise ValueError(f"unknown fusion mode {mode!r}")
    expand = (slice(None),) + (None,) * (ref.ndim - 1)
    w_r = np.asarray(weights.w_r, dtype=np.float64).reshape(-1)[expand]
    w_sd = (np.asarray(weights.w_s, dtype=np.float64) * np.asarray(weights.w_d, dtype=np.float64)).reshape(-1)[expand]
    return np.concatenate([ref * w_r, sen * w_sd], axis=1)


def detect_head(fused_feature: np.ndarray, head: DetectHead):
    """Returns ``(class logits (N, 2), box deltas (N, 4))``."""
    x = np.asarray(fused_feature, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    out = fc_forward(head.fc2, relu(fc_forward(head.fc1, x)))
    return out[:, :2], out[:, 2:]


# -- losses -------------------------------------------------------------------------

def shift_loss(predicted: np.ndarray, target: np.ndarray, labels: np.ndarray) -> float:
    """Smooth-L1 on both shift coordinates, summed over positives, divided by their count.

    Background RoIs (label 0) contribute nothing; no positives gives 0.
    """
    pos = np.asarray(labels) == 1
    n = int(pos.sum())
    if n == 0:
        return 0.0
    diff = np.asarray(predicted, dtype=np.float64)[pos] - np.asarray(target, dtype=np.float64)[pos]
    return float(smooth_l1(diff).sum() / n)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    lp = log_softmax2(logits)
    return float(-lp[np.arange(len(labels)), labels].mean()) if len(labels) else 0.0


def reg_loss(deltas: np.ndarray, targets: np.ndarray, labels: np.ndarray) -> float:
    return shift_loss(deltas, targets, labels)


def total_loss(cls_terms: float, shift_terms: float, reg_terms: float, lam: float = 1.0) -> float:
    return cls_terms + lam * shift_terms + reg_terms


# -- full forward/backward for a batch of RoIs --------------------------------------

@dataclass
class Batch:
    rois: np.ndarray  # (N, 4) shared proposal boxes, image px
    sensed_rois: np.ndarray  # (N, 4) sensed-side boxes (jittered during training)
    labels: np.ndarray  # (N,) 1 pedestrian / 0 background
    shift_targets: np.ndarray  # (N, 2), rows for label 0 or missing targets are ignored
    shift_mask: np.ndarray  # (N,) bool
    reg_targets: np.ndarray  # (N, 4)
    warning: Optional[str] = None

    def __len__(self):
        return len(self.labels)


@dataclass
class LossBreakdown:
    total: float
    cls: float
    shift: float
    reg: float
    conf: float = 0.0


class Detector:
    """Parameters plus configuration; forward, loss and gradients for RoI batches."""

    def __init__(self, params: dict, config: ModelConfig):
        self.params = params
        self.config = config

    @classmethod
    def create(cls, config: ModelConfig, seed: int, calibration_images: Sequence[tuple] = ()) -> "Detector":
        """Fresh parameters; backbone normalization is calibrated when image pairs are given."""
        params = init_params(config, seed)
        if len(calibration_images):
            calibrate_backbone(params, calibration_images)
        return cls(params, config)

    def features(self, reference_image, sensed_image) -> TwoStreamFeatures:
        return extract_features(reference_image, sensed_image, self.params, self.config.stride)

    # forward pass shared by inference and training
    def _forward(self, feats: TwoStreamFeatures, rois, sensed_rois, with_grad=False):
        cfg = self.config
        p = self.params
        n = len(rois)
        inv = 1.0 / feats.stride
        c = {}
        if cfg.enable_rfa:
            c.update(_rfa_arrays(feats, rois, sensed_rois, rfa_head(p), cfg.context_factor,
                                 cfg.pool_size, cfg.samples_per_bin, with_grad=with_grad))
        else:
            c["R"] = roi_align_batch(feats.reference, rois * inv, cfg.pool_size, cfg.pool_size, cfg.samples_per_bin)
            c["S"] = roi_align_batch(feats.sensed, sensed_rois * inv, cfg.pool_size, cfg.pool_size,
                                     cfg.samples_per_bin)
        Rf = c["R"].reshape(n, -1)
        Sf = c["S"].reshape(n, -1)
        c["Rf"], c["Sf"] = Rf, Sf
        if cfg.fusion_mode == "caf":
            br = confidence_branches(p)
            c["hr"], c["ar"], c["zr"] = _branch_forward(br["reference"], Rf)
            c["hs"], c["as"], c["zs"] = _branch_forward(br["sensed"], Sf)
            c["W"] = weights_from_probs(softmax2(c["zr"])[1], softmax2(c["zs"])[1])
            fused = fuse(Rf, Sf, c["W"], "caf")
        else:
            fused = fuse(Rf, Sf, None, "naive")
        c["fused"] = fused
        dh = detect_head_of(p)
        c["hd"] = fc_forward(dh.fc1, fused)
        c["ad"] = relu(c["hd"])
        out = fc_forward(dh.fc2, c["ad"])
        c["logits"], c["deltas"] = out[:, :2], out[:, 2:]
        return c

    def predict(self, feats: TwoStreamFeatures, proposals: np.ndarray):
        """Scores p1, refined reference boxes, sensed boxes and predicted shifts for ``(N, 4)`` proposals."""
        proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
        if len(proposals) == 0:
            z = np.zeros((0, 4))
            return np.zeros(0), z, z, np.zeros((0, 2))
        c = self._forward(feats, proposals, proposals)
        p1 = softmax2(c["logits"])[1]
        boxes = geom.decode_deltas(proposals, c["deltas"])
        t = c["t"] if "t" in c else np.zeros((len(proposals), 2))
        sensed_boxes = geom.apply_shift_array(boxes, t)
        return p1, boxes, sensed_boxes, t

    def loss_and_grads(self, feats: TwoStreamFeatures, batch: Batch, lam: float = 1.0,
                       conf_weight: float = 1.0, need_grads: bool = True):
        cfg = self.config
        p = self.params
        n = len(batch)
        labels = np.asarray(batch.labels, dtype=np.int64)
        pos = labels == 1
        c = self._forward(feats, batch.rois, batch.sensed_rois,
                          with_grad=need_grads and cfg.enable_rfa and cfg.repool_grad)

        l_cls = cross_entropy(c["logits"], labels)
        l_reg = reg_loss(c["deltas"], batch.reg_targets, labels)
        shift_gate = pos & np.asarray(batch.shift_mask, dtype=bool)
        l_shift = shift_loss(c["t"], batch.shift_targets, shift_gate.astype(np.int64)) if cfg.enable_rfa else 0.0
        l_conf = 0.0
        if cfg.fusion_mode == "caf" and conf_weight:
            l_conf = conf_weight * (cross_entropy(c["zr"], labels) + cross_entropy(c["zs"], labels))
        total = total_loss(l_cls + l_conf, l_shift, l_reg, lam)
        check_finite(np.array([total]), "loss")
        breakdown = LossBreakdown(total, l_cls + l_conf, l_shift, l_reg, l_conf)
        if not need_grads:
            return breakdown, None

        grads = {k: np.zeros_like(p[k]) for k in trainable_names(p)}
        onehot = np.eye(2)[labels]
        d_out = np.zeros((n, 6))
        d_out[:, :2] = (np.exp(log_softmax2(c["logits"])) - onehot) / n
        n_pos = int(pos.sum())
        if n_pos:
            d_out[pos, 2:] = smooth_l1_grad(c["deltas"][pos] - batch.reg_targets[pos]) / n_pos
        dh = detect_head_of(p)
        d_ad, grads["det.fc2.weight"], grads["det.fc2.bias"] = fc_backward(dh.fc2, c["ad"], d_out)
        d_hd = d_ad * (c["hd"] > 0)
        d_fused, grads["det.fc1.weight"], grads["det.fc1.bias"] = fc_backward(dh.fc1, c["fused"], d_hd)

        D = c["Rf"].shape[1]
        d_Rf_fused, d_Sf_fused = d_fused[:, :D], d_fused[:, D:]
        if cfg.fusion_mode == "caf":
            W = c["W"]
            d_wr = np.sum(d_Rf_fused * c["Rf"], axis=1)
            d_wsd = np.sum(d_Sf_fused * c["Sf"], axis=1)
            d_ws = d_wsd * W.w_d
            d_wd = d_wsd * W.w_s
            d_S = d_Sf_fused * (W.w_s * W.w_d)[:, None]
            sgn = np.sign(W.p1_r - W.p1_s)
            d_p1r = d_wr * 2.0 * np.sign(2.0 * W.p1_r - 1.0) - d_wd * sgn
            d_p1s = d_ws * 2.0 * np.sign(2.0 * W.p1_s - 1.0) + d_wd * sgn
            br = confidence_branches(p)
            for m, d_p1, key in (("reference", d_p1r, "r"), ("sensed", d_p1s, "s")):
                pr0, pr1 = softmax2(c["z" + key])
                dz = np.stack([-d_p1 * pr0 * pr1, d_p1 * pr0 * pr1], axis=1)
                if conf_weight:
                    dz += conf_weight * (np.exp(log_softmax2(c["z" + key])) - onehot) / n
                b = br[m]
                d_a, grads[f"conf.{m}.fc2.weight"], grads[f"conf.{m}.fc2.bias"] = fc_backward(b.fc2, c["a" + key], dz)
                d_h = d_a * (c["h" + key] > 0)
                d_in, grads[f"conf.{m}.fc1.weight"], grads[f"conf.{m}.fc1.bias"] = fc_backward(b.fc1, c[key.upper() + "f"], d_h)
                if key == "s":
                    d_S = d_S + d_in
        else:
            d_S = d_Sf_fused

        if cfg.enable_rfa:
            head = rfa_head(p)
            d_t = np.zeros((n, 2))
            if shift_gate.any():
                d_t[shift_gate] = lam * smooth_l1_grad(c["t"][shift_gate] - batch.shift_targets[shift_gate]) / int(shift_gate.sum())
            if cfg.repool_grad:
                # re-pooling coordinates move by t * size / stride in feature space
                d_Sb = d_S.reshape(c["S"].shape)
                scale = batch.sensed_rois[:, 2:] / feats.stride
                d_t[:, 0] += np.sum(d_Sb * c["dSx"], axis=(1, 2, 3)) * scale[:, 0]
                d_t[:, 1] += np.sum(d_Sb * c["dSy"], axis=(1, 2, 3)) * scale[:, 1]
            d_a, grads["rfa.fc2.weight"], grads["rfa.fc2.bias"] = fc_backward(head.fc2, c["a"], d_t)
            d_h = d_a * (c["h"] > 0)
            _, grads["rfa.fc1.weight"], grads["rfa.fc1.bias"] = fc_backward(head.fc1, c["x"], d_h)
        return breakdown, grads
