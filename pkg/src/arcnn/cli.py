"""Command-line entry point: ``arcnn {generate,validate,stats,train,eval,sweep}``.

Every command that is given ``--out`` writes its artifacts there together
with one ``manifest.json``.  Diagnostics go to stderr; the exit status is 0
only for a clean run (1 for data diagnostics, 2 for usage or config errors).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from . import __version__
from .annot import (AnnotationError, document_to_frames, load_detections, read_document, reasonable_filter,
                    shift_statistics, validate_document)
from .detector import Detector, ModelConfig, load_checkpoint, params_digest, save_checkpoint
from .evaluation import (Report, SweepError, direction_metrics, directions_grid, emit_report, full_grid,
                         mr_score, shift_grid_sweep)
from .pipeline import DetectorRunner, calibration_pairs, model_config_for
from .synthtrain import (SceneConfig, TrainConfig, config_from_dict, generate_dataset, load_dataset,
                         save_dataset, train)

log = logging.getLogger("arcnn")

EXIT_OK, EXIT_DIAGNOSTICS, EXIT_USAGE = 0, 1, 2
MANIFEST_NAME = "manifest.json"


class UsageError(Exception):
    """Bad flags or configuration, reported before any compute."""


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: Optional[int]
    artifact_paths: list = field(default_factory=list)
    tool_version: str = __version__
    timestamp: str = ""

    def write(self, out_dir: Path) -> Path:
        path = out_dir / MANIFEST_NAME
        doc = asdict(self)
        doc["timestamp"] = self.timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")
        return path


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return "sha256:" + hashlib.sha256(blob).hexdigest()


def parse_bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _read_json(path, what: str):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read {what} {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} {path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def _out_dir(args) -> Optional[Path]:
    if args.out is None:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(args, out: Optional[Path], settings: dict, artifacts: list) -> None:
    if out is None:
        return
    rel = sorted(os.path.relpath(p, out) for p in artifacts)
    RunManifest(args.command, config_hash(settings), getattr(args, "seed", None), rel).write(out)


def _load_annotation_doc(path):
    if not Path(path).exists():
        raise UsageError(f"no such file: {path}")
    try:
        return read_document(path)
    except AnnotationError as exc:
        raise UsageError(str(exc)) from exc


def _report_diagnostics(diags) -> None:
    for d in diags:
        print(f"arcnn: {d}", file=sys.stderr)


# -- commands ------------------------------------------------------------------------

def cmd_generate(args) -> int:
    try:
        scene = config_from_dict(SceneConfig, _read_json(args.config, "scene config")) if args.config else SceneConfig()
        if args.seed is not None:
            scene = replace(scene, seed=args.seed)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid scene config: {exc}") from exc
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    out = _out_dir(args)
    if out is None:
        raise UsageError("generate needs --out")
    ds = generate_dataset(scene, args.frames)
    artifacts = save_dataset(ds, out)
    _finish(args, out, {"scene": asdict(scene), "frames": args.frames}, artifacts)
    return EXIT_OK


def cmd_validate(args) -> int:
    diags = validate_document(_load_annotation_doc(args.annotations))
    _report_diagnostics(diags)
    if not diags:
        log.info("%s: ok", args.annotations)
    _finish(args, _out_dir(args), {"annotations": os.path.abspath(args.annotations)}, [])
    return EXIT_DIAGNOSTICS if diags else EXIT_OK


def cmd_stats(args) -> int:
    doc = _load_annotation_doc(args.annotations)
    diags = validate_document(doc)
    if diags:
        _report_diagnostics(diags)
        return EXIT_DIAGNOSTICS
    st = shift_statistics(document_to_frames(doc))
    summary = {"histogram": st.histogram, "mean": [st.mean_x, st.mean_y], "std": [st.std_x, st.std_y],
               "n_paired": st.n_paired, "n_unpaired": st.n_unpaired, "unpaired_fraction": st.unpaired_fraction}
    print(f"paired objects: {st.n_paired}  unpaired: {st.n_unpaired} ({100 * st.unpaired_fraction:.1f}%)")
    print(f"shift mean (x, y): {st.mean_x:.3f} {st.mean_y:.3f} px   std: {st.std_x:.3f} {st.std_y:.3f} px")
    for k, n in enumerate(st.histogram):
        print(f"  [{k}, {k + 1}) px: {n}")
    out = _out_dir(args)
    artifacts = []
    if out is not None:
        path = out / "stats.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=1)
            fh.write("\n")
        artifacts.append(path)
    _finish(args, out, {"annotations": os.path.abspath(args.annotations)}, artifacts)
    return EXIT_OK


def _train_settings(args):
    """TrainConfig and ModelConfig from ``--config`` plus flag overrides."""
    raw = _read_json(args.config, "train config") if args.config else {}
    if not isinstance(raw, dict):
        raise UsageError("train config must be a JSON object")
    unknown = set(raw) - {"train", "model"}
    if unknown:
        raise UsageError(f"unknown train config sections: {sorted(unknown)}")
    try:
        tc = config_from_dict(TrainConfig, raw.get("train", {}))
        overrides = {}
        if args.enable_rfa is not None:
            overrides["enable_rfa"] = args.enable_rfa
        if args.enable_jitter is not None:
            overrides["enable_jitter"] = args.enable_jitter
        if args.fusion is not None:
            overrides["fusion_mode"] = args.fusion
        if args.lr is not None:
            overrides["learning_rate"] = args.lr
        if args.epochs is not None:
            overrides["epochs"] = args.epochs
        tc = replace(tc, **overrides)
        mc = model_config_for(tc, config_from_dict(ModelConfig, raw.get("model", {})))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    return tc, mc


def _load_dataset(path):
    if not (Path(path) / "dataset.json").exists():
        raise UsageError(f"{path} is not a dataset directory (no dataset.json)")
    try:
        return load_dataset(path)
    except (AnnotationError, ValueError, OSError) as exc:
        raise UsageError(f"cannot load dataset {path}: {exc}") from exc


def cmd_train(args) -> int:
    tc, mc = _train_settings(args)
    ds = _load_dataset(args.dataset)
    out = _out_dir(args)
    if out is None:
        raise UsageError("train needs --out")
    seed = 0 if args.seed is None else args.seed
    det = Detector.create(mc, seed, calibration_pairs(ds))

    def progress(epoch, it, loss):
        if it % 50 == 0:
            log.info("epoch %d iter %d loss %.4f", epoch, it, loss.total)

    res = train(det, ds, tc, seed, progress=progress)
    ckpt = out / "model.ckpt"
    save_checkpoint(ckpt, det.params, mc, {"seed": seed, "train_config": asdict(tc), "tool_version": __version__})
    trace = out / "trace.json"
    with open(trace, "w", encoding="utf-8") as fh:
        json.dump({"total": res.trace, "components": [list(c) for c in res.components],
                   "component_names": ["cls", "shift", "reg"]}, fh)
        fh.write("\n")
    print(f"checkpoint {ckpt} params {params_digest(det.params)[:16]}")
    settings = {"train": asdict(tc), "model": asdict(mc), "dataset": os.path.abspath(args.dataset)}
    _finish(args, out, settings, [ckpt, trace])
    return EXIT_OK


def _load_detector(path) -> Detector:
    if not Path(path).exists():
        raise UsageError(f"no such checkpoint: {path}")
    try:
        params, mc, _ = load_checkpoint(path)
    except (ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"rejected checkpoint {path}: {exc}") from exc
    return Detector(params, mc)


def _write_report(rep: Report, out: Path, fmt: str) -> Path:
    path = out / f"report.{fmt}"
    emit_report(rep, path, fmt)
    return path


def cmd_eval(args) -> int:
    ds = _load_dataset(args.dataset)
    out = _out_dir(args)
    if out is None:
        raise UsageError("eval needs --out")
    seed = 0 if args.seed is None else args.seed
    frames = reasonable_filter(ds.frames, args.min_height)
    if args.detections:
        try:
            dets = load_detections(args.detections)
        except (AnnotationError, OSError) as exc:
            raise UsageError(str(exc)) from exc
        source = {"detections": os.path.abspath(args.detections)}
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --detections")
        det = _load_detector(args.checkpoint)
        dets = DetectorRunner(det, ds, seed).detect(0, 0)
        source = {"checkpoint": params_digest(det.params)}
    try:
        res = mr_score(frames, dets, args.modality)
    except ValueError as exc:
        print(f"arcnn: {exc}", file=sys.stderr)
        return EXIT_DIAGNOSTICS
    rep = Report(res.mr, list(res.curve.points), {}, {}, args.modality)
    path = _write_report(rep, out, args.format)
    print("MR " + ("no-gt" if res.mr is None else f"{res.mr:.6f}") + f" ({args.modality})")
    settings = dict(source, dataset=os.path.abspath(args.dataset), modality=args.modality,
                    min_height=args.min_height, format=args.format)
    _finish(args, out, settings, [path])
    return EXIT_OK


def parse_grid(spec: str) -> list[tuple[int, int]]:
    if spec == "full":
        return full_grid()
    if spec == "directions":
        return directions_grid()
    if spec.startswith("custom:"):
        doc = _read_json(spec[len("custom:"):], "grid file")
        try:
            modes = [(int(m[0]), int(m[1])) for m in doc]
        except (TypeError, ValueError, IndexError, KeyError) as exc:
            raise UsageError(f"grid file must be a JSON list of [dx, dy] pairs: {exc}") from exc
        if not modes:
            raise UsageError("grid file lists no modes")
        return modes
    raise UsageError(f"--grid must be full, directions or custom:FILE, got {spec!r}")


def cmd_sweep(args) -> int:
    modes = parse_grid(args.grid)
    det = _load_detector(args.checkpoint)
    ds = _load_dataset(args.dataset)
    out = _out_dir(args)
    if out is None:
        raise UsageError("sweep needs --out")
    seed = 0 if args.seed is None else args.seed
    runner = DetectorRunner(det, ds, seed)
    try:
        res = shift_grid_sweep(runner.detect, ds.frames, modes, args.modality, args.min_height)
    except SweepError as exc:
        print(f"arcnn: sweep aborted: {exc}", file=sys.stderr)
        return EXIT_DIAGNOSTICS
    dirs = {}
    if set(directions_grid()) <= set(res.grid) and all(res.grid[m] is not None for m in directions_grid()):
        dirs = direction_metrics(res.grid)
    origin = res.grid.get((0, 0))
    rep = Report(origin, list(res.curves[(0, 0)].points) if (0, 0) in res.curves else [], res.grid, dirs,
                 args.modality)
    path = _write_report(rep, out, args.format)
    for name, (mu, sg) in dirs.items():
        print(f"{name}: mean {mu:.4f} std {sg:.4f}")
    print(f"{len(res.grid)} modes -> {path}")
    settings = {"checkpoint": params_digest(det.params), "dataset": os.path.abspath(args.dataset),
                "grid": sorted(res.grid), "modality": args.modality, "min_height": args.min_height,
                "format": args.format}
    _finish(args, out, settings, [path])
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="arcnn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"arcnn {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--out", required=out_required, help="output directory (artifacts + manifest.json)")
        sp.add_argument("--seed", type=int, default=None)

    g = sub.add_parser("generate", help="render a synthetic paired dataset")
    common(g, True)
    g.add_argument("--config", help="SceneConfig JSON")
    g.add_argument("--frames", type=int, default=200)
    g.set_defaults(func=cmd_generate)

    v = sub.add_parser("validate", help="check an annotation file")
    v.add_argument("annotations")
    common(v)
    v.set_defaults(func=cmd_validate)

    s = sub.add_parser("stats", help="shift histogram and unpaired fraction")
    s.add_argument("annotations")
    common(s)
    s.set_defaults(func=cmd_stats)

    t = sub.add_parser("train", help="train a detector on a dataset directory")
    common(t, True)
    t.add_argument("--config", help='JSON with optional "train" and "model" sections')
    t.add_argument("--dataset", required=True)
    t.add_argument("--enable-rfa", type=parse_bool, default=None, metavar="BOOL")
    t.add_argument("--enable-jitter", type=parse_bool, default=None, metavar="BOOL")
    t.add_argument("--fusion", choices=("caf", "naive"), default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "log-average miss rate on a dataset"),
                                 ("sweep", cmd_sweep, "miss rate over sensed-image shift modes")):
        e = sub.add_parser(name, help=helptext)
        common(e, True)
        e.add_argument("--checkpoint", required=name == "sweep")
        e.add_argument("--dataset", required=True)
        e.add_argument("--modality", choices=("reference", "sensed"), default="reference")
        e.add_argument("--format", choices=("json", "csv"), default="json")
        e.add_argument("--min-height", type=float, default=55.0)
        if name == "eval":
            e.add_argument("--detections", help="score a JSON-lines detection file instead of running a model")
        else:
            e.add_argument("--grid", default="directions", help="full | directions | custom:FILE")
        e.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"arcnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
