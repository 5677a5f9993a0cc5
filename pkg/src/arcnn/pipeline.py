"""End-to-end runs: synthetic benchmark, ablation variants, detection and sweeps."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import geom
from .annot import Detection, reasonable_filter, shift_all_sensed
from .detector import (Detector, ModelConfig, ProposalConfig, TwoStreamFeatures, aggregate_proposals_array,
                       scripted_proposals, stream_features)
from .evaluation import (MrResult, SweepResult, direction_metrics, mr_score, shift_grid_sweep,
                         translate_image)
from .geom import Box
from .synthtrain import Dataset, SceneConfig, TrainConfig, generate_dataset, train

log = logging.getLogger(__name__)

# Table-5-style ablation rows: (enable_rfa, enable_jitter, fusion_mode)
ABLATION_ROWS = {
    "baseline": (False, False, "naive"),
    "+RFA": (True, False, "naive"),
    "+RoIJ": (True, True, "naive"),
    "+CAF": (True, True, "caf"),
}


def ablation_config(row: str, base: TrainConfig = TrainConfig()) -> TrainConfig:
    rfa, jit, fusion = ABLATION_ROWS[row]
    return replace(base, enable_rfa=rfa, enable_jitter=jit, fusion_mode=fusion)


def model_config_for(tc: TrainConfig, base: ModelConfig = ModelConfig()) -> ModelConfig:
    return replace(base, enable_rfa=tc.enable_rfa, fusion_mode=tc.fusion_mode)


@dataclass
class DetectConfig:
    nms_threshold: float = 0.5
    max_per_frame: int = 20
    min_score: float = 0.0
    proposal: ProposalConfig = field(default_factory=ProposalConfig)


class DetectorRunner:
    """Runs a detector over a dataset with sensed images translated by whole pixels.

    Reference features are computed once; proposal noise is seeded per frame,
    so every shift mode sees the same draws.
    """

    def __init__(self, detector: Detector, dataset: Dataset, seed: int = 0,
                 config: DetectConfig = DetectConfig()):
        self.detector = detector
        self.dataset = dataset
        self.seed = seed
        self.config = config
        self._ref = [stream_features(dataset.images(i)[0], detector.params, "reference")
                     for i in range(len(dataset))]

    def detect_frame(self, i: int, dx: int = 0, dy: int = 0) -> list[Detection]:
        ds, cfg = self.dataset, self.config
        sensed = translate_image(ds.images(i)[1], dx, dy)
        f_s = stream_features(sensed, self.detector.params, "sensed")
        h, w = sensed.shape[1:]
        feats = TwoStreamFeatures(self._ref[i], f_s, self.detector.config.stride, (w, h))
        frame = shift_all_sensed([ds.frames[i]], dx, dy)[0] if (dx or dy) else ds.frames[i]
        rng = np.random.default_rng([self.seed, i])
        br, sr, bs, ss = scripted_proposals(frame, rng, cfg.proposal, ds.distractors[i])
        props, _ = aggregate_proposals_array(br, sr, bs, ss, cfg.proposal.nms_threshold)
        if len(props) == 0:
            return []
        scores, boxes, sboxes, _ = self.detector.predict(feats, props)
        keep = geom.nms_array(boxes, scores, cfg.nms_threshold)[: cfg.max_per_frame]
        out = []
        fid = frame.frame_id
        for k in keep:
            if scores[k] < cfg.min_score or np.any(boxes[k, 2:] <= 0):
                continue
            out.append(Detection(fid, Box(*boxes[k]), float(scores[k]), "reference"))
            out.append(Detection(fid, Box(*sboxes[k]), float(scores[k]), "sensed"))
        return out

    def detect(self, dx: int = 0, dy: int = 0) -> list[Detection]:
        dets = []
        for i in range(len(self.dataset)):
            dets.extend(self.detect_frame(i, dx, dy))
        return dets


@dataclass
class BenchmarkConfig:
    n_frames: int = 200
    train_fraction: float = 0.75
    train_shift_std: tuple = (0.0, 0.0)
    scene: SceneConfig = field(default_factory=SceneConfig)
    min_height: float = 40.0
    seed: int = 0


def make_benchmark(cfg: BenchmarkConfig) -> tuple[Dataset, Dataset]:
    """Training split with the configured natural shift, test split exactly aligned."""
    n_train = int(round(cfg.n_frames * cfg.train_fraction))
    tr = generate_dataset(replace(cfg.scene, shift_std=tuple(cfg.train_shift_std), seed=cfg.seed), n_train)
    te = generate_dataset(replace(cfg.scene, shift_std=(0.0, 0.0), seed=cfg.seed + 1_000_003),
                          cfg.n_frames - n_train)
    return tr, te


def calibration_pairs(ds: Dataset, limit: int = 64) -> list:
    """Image pairs used to calibrate backbone normalization (the first ``limit`` frames)."""
    return [ds.images(i) for i in range(min(limit, len(ds)))]


def train_variant(train_set: Dataset, tc: TrainConfig, seed: int, model: ModelConfig = ModelConfig()):
    det = Detector.create(model_config_for(tc, model), seed, calibration_pairs(train_set))
    res = train(det, train_set, tc, seed)
    return det, res


def evaluate(runner: DetectorRunner, min_height: float, modality: str = "reference") -> MrResult:
    frames = reasonable_filter(runner.dataset.frames, min_height)
    return mr_score(frames, runner.detect(0, 0), modality)


def sweep(runner: DetectorRunner, modes: Sequence[tuple], min_height: float, threads: Optional[int] = None,
          with_directions: bool = False) -> SweepResult:
    res = shift_grid_sweep(runner.detect, runner.dataset.frames, modes, "reference", min_height, threads=threads)
    if with_directions:
        res.directions = direction_metrics(res.grid)
    return res
