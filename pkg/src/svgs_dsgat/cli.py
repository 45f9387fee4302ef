"""Command-line entry point: ``svgs-dsgat <subcommand> ...``.

Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or
configuration error. Diagnostics go to stderr; data goes to files or stdout.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dataio, gradcheck, metrics, training
from .dataio import ImageBuffer

log = logging.getLogger("svgs_dsgat")

MANIFEST_FORMAT = "svgs-dsgat-run/1"
METRICS_SCHEMA = "metrics/1"
DETECTIONS_HEADER = "detections/1"
TRACKING_SCHEMA = "tracking/1"


class UsageError(Exception):
    """Bad arguments or configuration (exit code 2)."""


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    data_dir: str = ""
    out_dir: str = "run"
    train_start: int = 0
    train_stop: int | None = None
    # optimisation
    lr: float = 0.001
    batch_size: int = 32
    epochs: int = 200
    seed: int = 42
    early_stop: bool = True
    patience: int = 20
    val_fraction: float = 0.1
    image_size: int = 64
    patch_size: int = 8
    weight_decay: float = 1e-4
    # model
    sage_widths: tuple[int, ...] = (32, 32)
    k: int = 5
    aggregator: str = "mean"
    sage_activation: str = "relu"
    dsgat_out: int = 32
    dsgat_activation: str = "identity"
    use_sage: bool = True
    use_svam: bool = True
    use_dsgat: bool = True
    # detection / metrics
    score_threshold: float = 0.5
    nms_iou: float = 0.5

    def to_json(self) -> dict:
        d = asdict(self)
        d["sage_widths"] = list(self.sage_widths)
        return d

    def train_config(self) -> training.TrainConfig:
        names = {f.name for f in fields(training.TrainConfig)}
        return training.TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def model_config(self, in_features: int, num_classes: int) -> training.ModelConfig:
        names = {f.name for f in fields(training.ModelConfig)} - {"in_features", "num_classes"}
        kw = {k: v for k, v in asdict(self).items() if k in names}
        return training.ModelConfig(in_features=in_features, num_classes=num_classes, **kw)


_BOOL_KEYS = {f.name for f in fields(RunConfig) if f.type in ("bool", bool)}
_INT_KEYS = {"train_start", "batch_size", "epochs", "seed", "patience", "image_size", "patch_size", "k", "dsgat_out"}
_FLOAT_KEYS = {"lr", "val_fraction", "weight_decay", "score_threshold", "nms_iou"}
_STR_KEYS = {"data_dir", "out_dir", "aggregator", "sage_activation", "dsgat_activation"}


def parse_run_config(doc) -> RunConfig:
    """Build a RunConfig from a flat JSON object.

    Unknown keys are rejected. A run manifest (``{"format": ..., "config":
    {...}}``) is accepted too, so any run can be repeated from its manifest.
    ``lr`` may also be the name of a preset.
    """
    if isinstance(doc, dict) and doc.get("format") == MANIFEST_FORMAT:
        doc = doc.get("config")
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    kw = dict(doc)
    for key, val in kw.items():
        if key in _BOOL_KEYS and not isinstance(val, bool):
            raise UsageError(f"{key} must be true or false")
        if key in _INT_KEYS and (isinstance(val, bool) or not isinstance(val, int)):
            raise UsageError(f"{key} must be an integer")
        if key in _STR_KEYS and not isinstance(val, str):
            raise UsageError(f"{key} must be a string")
        if key == "lr" and isinstance(val, str):
            if val not in training.LR_PRESETS:
                raise UsageError(f"unknown lr preset {val!r}; choose from {sorted(training.LR_PRESETS)}")
            kw[key] = training.LR_PRESETS[val]
        elif key in _FLOAT_KEYS and (isinstance(val, bool) or not isinstance(val, (int, float))):
            raise UsageError(f"{key} must be a number")
    if "train_stop" in kw and kw["train_stop"] is not None and not isinstance(kw["train_stop"], int):
        raise UsageError("train_stop must be an integer or null")
    if "sage_widths" in kw:
        w = kw["sage_widths"]
        if not isinstance(w, list) or not all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in w):
            raise UsageError("sage_widths must be a list of positive integers")
        kw["sage_widths"] = tuple(w)
    cfg = RunConfig(**kw)
    try:
        cfg.train_config()
    except training.ConfigError as exc:
        raise UsageError(str(exc)) from None
    for name in ("aggregator", "sage_activation", "dsgat_activation"):
        allowed = ("mean", "maxpool") if name == "aggregator" else ("relu", "sigmoid", "identity")
        if getattr(cfg, name) not in allowed:
            raise UsageError(f"{name} must be one of {', '.join(allowed)}")
    return cfg


def _load_json(path: str):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None


def _finite_or_null(obj):
    """NaN marks an undefined metric (e.g. an empty size bucket); JSON has no NaN, so it becomes null."""
    if isinstance(obj, dict):
        return {k: _finite_or_null(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite_or_null(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def _dump_json(doc, path: Path | None) -> None:
    text = json.dumps(_finite_or_null(doc), indent=2, sort_keys=True, allow_nan=False) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# detections file
# ---------------------------------------------------------------------------


def write_detections(dets: Sequence[metrics.Detection], path: Path) -> None:
    lines = [DETECTIONS_HEADER]
    for d in dets:
        lines.append(json.dumps({"image_id": d.image_id, "x": d.box.x, "y": d.box.y, "w": d.box.w,
                                 "h": d.box.h, "class": d.class_id, "score": d.score}))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_detections(path: str) -> list[metrics.Detection]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        return []
    if lines[0].strip() != DETECTIONS_HEADER:
        raise UsageError(f"{path}: line 1: expected header {DETECTIONS_HEADER!r}")
    out = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            r = json.loads(line)
            out.append(metrics.Detection(str(r["image_id"]), metrics.Box(r["x"], r["y"], r["w"], r["h"]),
                                         int(r["class"]), float(r["score"])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"{path}: line {n}: bad detection record ({exc})") from None
    return out


# ---------------------------------------------------------------------------
# model-based detection
# ---------------------------------------------------------------------------


def detect_graph(model, g, threshold: float, nms_iou: float, trace: dict | None = None):
    scores = training.predict(model, g, trace=trace)
    return scores, metrics.suppress_overlaps(metrics.nodes_to_boxes(scores, g, threshold), nms_iou)


def detect_all(model, graphs, threshold: float, nms_iou: float, workers: int = 1):
    """Per-image detections; results are gathered in input order whatever ``workers`` is."""
    def one(g):
        return detect_graph(model, g, threshold, nms_iou)[1]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_image = list(pool.map(one, graphs))
    else:
        per_image = [one(g) for g in graphs]
    return per_image


def _load_model(path: str):
    try:
        return training.load_checkpoint(path)
    except FileNotFoundError:
        raise UsageError(f"no such checkpoint: {path}") from None


def _annotation_path(data_dir: str) -> Path:
    if not data_dir:
        raise UsageError("a dataset directory is required")
    path = Path(data_dir) / dataio.ANNOTATION_FILE
    if not path.exists():
        raise UsageError(f"{data_dir}: no {dataio.ANNOTATION_FILE} found")
    return path


def _load_data(data_dir: str, patch_size: int, start: int, stop: int | None):
    _annotation_path(data_dir)
    return dataio.load_dataset(data_dir, patch_size, start, stop)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    lo, hi = args.objects
    if lo < 0 or hi < lo:
        raise UsageError("--objects needs 0 <= MIN <= MAX")
    if args.size <= 0 or args.size % args.patch_size:
        raise UsageError(f"--size {args.size} must be a positive multiple of the patch size {args.patch_size}")
    channels = 1 if args.gray else 3
    if args.motion:
        ann = dataio.synth_motion(args.out, seed=args.seed, n_frames=args.frames, n_tracks=args.tracks,
                                  size=args.size, patch_size=args.patch_size, channels=channels)
    else:
        ann = dataio.synth_generate(args.out, seed=args.seed, n_images=args.n, size=args.size,
                                    n_objects_range=(lo, hi), patch_size=args.patch_size, channels=channels)
    log.info("wrote %d images to %s", len(ann), args.out)
    return 0


def cmd_train(args) -> int:
    doc = _load_json(args.config) if args.config else {}
    cfg = parse_run_config(doc)
    if args.data:
        cfg.data_dir = args.data
    if args.out:
        cfg.out_dir = args.out
    ann, graphs = _load_data(cfg.data_dir, cfg.patch_size, cfg.train_start, cfg.train_stop)
    if not graphs:
        raise UsageError("the training slice is empty")
    model = training.SvgsDsgatModel(cfg.model_config(graphs[0].num_features, len(ann.classes)))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = training.param_count(model)
    manifest = {"format": MANIFEST_FORMAT, "config": cfg.to_json(), "param_count": counts}
    _dump_json(manifest, out / "run-manifest.json")

    def progress(row):
        if not args.quiet:
            print(f"epoch {row['epoch']:4d}  train {row['train_loss']:.6f}"
                  + ("" if row["val_loss"] is None else f"  val {row['val_loss']:.6f}"), file=sys.stderr)

    result = training.train(model, graphs, cfg.train_config(), progress=progress)
    training.save_checkpoint(model, out / "checkpoint.json")
    (out / "loss.csv").write_text(result.loss_csv(), encoding="utf-8")
    manifest["result"] = {"best_epoch": result.best_epoch, "stopped_early": result.stopped_early,
                          "epochs_run": result.log[-1]["epoch"],
                          "initial_loss": result.log[0]["train_loss"],
                          "final_loss": result.log[-1]["train_loss"]}
    _dump_json(manifest, out / "run-manifest.json")
    return 0


def metrics_document(dets, ann) -> dict:
    gts = metrics.ground_truth_from(ann)
    suite = metrics.map_suite(dets, gts, classes=list(range(len(ann.classes))))
    per_class = {ann.classes[c]: v for c, v in suite.pop("per_class").items()}
    return {"schema": METRICS_SCHEMA, "images": len(ann), "detections": len(dets),
            "ground_truth": len(gts), "metrics": suite, "per_class": per_class}


def _metrics_csv(doc: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(metrics.METRIC_COLUMNS)
    w.writerow([repr(float(doc["metrics"][c])) for c in metrics.METRIC_COLUMNS])
    return buf.getvalue()


def cmd_eval(args) -> int:
    if bool(args.checkpoint) == bool(args.detections):
        raise UsageError("give exactly one of --checkpoint or --detections")
    patch = args.patch_size
    if args.checkpoint:
        model = _load_model(args.checkpoint)
        ann, graphs = _load_data(args.data, patch, args.start, args.stop)
        per_image = detect_all(model, graphs, args.threshold, args.nms_iou, args.workers)
        dets = [d for ds in per_image for d in ds]
    else:
        ann = dataio.read_annotations(_annotation_path(args.data))
        ann = dataio.AnnotationSet(ann.classes, ann.records[args.start:args.stop])
        dets = read_detections(args.detections)
        known = {r.image_id for r in ann.records}
        dets = [d for d in dets if d.image_id in known]
    doc = metrics_document(dets, ann)
    _dump_json(doc, Path(args.out) if args.out else None)
    if args.csv:
        Path(args.csv).write_text(_metrics_csv(doc), encoding="utf-8")
    return 0


def _heatmap(values: np.ndarray, rows: int, cols: int, patch: int, lo: float, hi: float) -> ImageBuffer:
    span = hi - lo if hi > lo else 1.0
    grid = ((values - lo) / span).reshape(rows, cols)
    return ImageBuffer.from_array(np.kron(grid, np.ones((patch, patch))))


def cmd_detect(args) -> int:
    model = _load_model(args.checkpoint)
    ann, graphs = _load_data(args.data, args.patch_size, args.start, args.stop)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    all_dets = []
    for rec, g in zip(ann.records, graphs):
        trace: dict = {}
        scores, dets = detect_graph(model, g, args.threshold, args.nms_iou, trace)
        all_dets.extend(dets)
        grid = g.grids[0]
        if args.masks:
            mask = np.zeros((rec.height, rec.width))
            for d in dets:
                x0, y0 = int(np.floor(d.box.x)), int(np.floor(d.box.y))
                x1, y1 = int(np.ceil(d.box.x + d.box.w)), int(np.ceil(d.box.y + d.box.h))
                mask[max(y0, 0):min(y1, rec.height), max(x0, 0):min(x1, rec.width)] = 1.0
            dataio.write_image(ImageBuffer.from_array(mask), out / f"{rec.image_id}_mask.pgm")
        if args.dump_scores:
            np.savetxt(out / f"{rec.image_id}_scores.csv", scores, delimiter=",", fmt="%.17g",
                       header=",".join(ann.classes), comments="")
        if args.dump_saliency and "svam" in trace:
            tr = trace["svam"]
            dataio.write_image(_heatmap(tr.S, grid.rows, grid.cols, grid.patch_size, 0.0, float(tr.S.max())),
                               out / f"{rec.image_id}_saliency.pgm")
            for c in range(tr.E.shape[1]):
                dataio.write_image(_heatmap(tr.E[:, c], grid.rows, grid.cols, grid.patch_size, -1.0, 1.0),
                                   out / f"{rec.image_id}_edge_{c:02d}.pgm")
        if args.dump_attention and "attention" in trace:
            from .dsgat import attention_matrix

            alpha, dst, src = trace["attention"]
            np.savetxt(out / f"{rec.image_id}_attention.csv", attention_matrix(alpha, dst, src, g.num_nodes),
                       delimiter=",", fmt="%.17g")
    write_detections(all_dets, out / "detections.txt")
    log.info("%d detections over %d images", len(all_dets), len(graphs))
    return 0


def cmd_track_eval(args) -> int:
    if bool(args.checkpoint) == bool(args.gt_as_detections):
        raise UsageError("give exactly one of --checkpoint or --gt-as-detections")
    ann, graphs = _load_data(args.data, args.patch_size, 0, None)
    gt = metrics.tracks_from_annotations(ann)
    frames = [r.frame if r.frame is not None else i for i, r in enumerate(ann.records)]
    if args.gt_as_detections:
        per_frame = [[metrics.Detection(r.image_id, metrics.Box(b.x, b.y, b.w, b.h), b.class_id, 1.0)
                      for b in r.boxes] for r in ann.records]
    else:
        model = _load_model(args.checkpoint)
        per_frame = detect_all(model, graphs, args.threshold, args.nms_iou, args.workers)
    hyp = metrics.greedy_tracker(per_frame, iou_thr=args.track_iou, frames=frames)
    report = metrics.clear_mot(hyp, gt, iou_thr=args.iou)
    doc = {"schema": TRACKING_SCHEMA, "frames": len(frames), **report}
    _dump_json(doc, Path(args.out) if args.out else None)
    return 0


def cmd_gradcheck(args) -> int:
    modules = [m for m in (args.modules or "").split(",") if m.strip()]
    try:
        results = gradcheck.run([m.strip() for m in modules], tolerance=args.tolerance)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    width = max(len(r.name) for r in results)
    print(f"{'case':<{width}}  {'module':<9}  {'max rel err':>11}  {'tolerance':>9}  result")
    for r in results:
        print(f"{r.name:<{width}}  {r.module:<9}  {r.max_rel_error:11.3e}  {r.tolerance:9.1e}  "
              f"{'pass' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="svgs-dsgat", description="Graph-based underwater object detection on grid-patch graphs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("out", help="output directory (created if missing)")
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--n", type=_positive_int, default=250, help="number of still images")
    s.add_argument("--size", type=int, default=64, help="image side in pixels")
    s.add_argument("--patch-size", type=_positive_int, default=8)
    s.add_argument("--objects", type=int, nargs=2, default=(1, 3), metavar=("MIN", "MAX"))
    s.add_argument("--gray", action="store_true", help="single-channel PGM output")
    s.add_argument("--motion", action="store_true", help="a moving-object sequence instead of stills")
    s.add_argument("--frames", type=_positive_int, default=30)
    s.add_argument("--tracks", type=_positive_int, default=3)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model from a JSON run config")
    t.add_argument("--config", help="flat JSON config or a run-manifest.json")
    t.add_argument("--data", help="dataset directory (overrides data_dir)")
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.add_argument("--quiet", action="store_true", help="no per-epoch lines")
    t.set_defaults(func=cmd_train)

    def data_args(q, slicing=True):
        q.add_argument("--data", required=True, help="dataset directory")
        q.add_argument("--patch-size", type=_positive_int, default=8)
        if slicing:
            q.add_argument("--start", type=int, default=0, help="first record of the evaluated slice")
            q.add_argument("--stop", type=int, default=None, help="end of the evaluated slice (exclusive)")

    def detect_args(q):
        q.add_argument("--threshold", type=float, default=0.5, help="node score threshold")
        q.add_argument("--nms-iou", type=float, default=0.5)
        q.add_argument("--workers", type=_positive_int, default=1)

    e = sub.add_parser("eval", help="detection metrics (metrics/1 JSON)")
    data_args(e)
    e.add_argument("--checkpoint")
    e.add_argument("--detections", help="a detections/1 file instead of a model")
    e.add_argument("--out", help="metrics JSON path (default stdout)")
    e.add_argument("--csv", help="also write the metric columns as CSV")
    detect_args(e)
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("detect", help="write detections and optional masks and dumps")
    data_args(d)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--out", required=True, help="output directory")
    d.add_argument("--masks", action="store_true", help="binary PGM mask per image")
    d.add_argument("--dump-scores", action="store_true", help="per-node class scores as CSV")
    d.add_argument("--dump-saliency", action="store_true", help="saliency and edge maps as PGM")
    d.add_argument("--dump-attention", action="store_true", help="attention matrix as CSV")
    detect_args(d)
    d.set_defaults(func=cmd_detect)

    k = sub.add_parser("track-eval", help="CLEAR-MOT report on a frame sequence")
    data_args(k, slicing=False)
    k.add_argument("--checkpoint")
    k.add_argument("--gt-as-detections", action="store_true", help="feed annotated boxes to the tracker")
    k.add_argument("--iou", type=float, default=0.5, help="match threshold for the metric")
    k.add_argument("--track-iou", type=float, default=0.3, help="association threshold for the tracker")
    k.add_argument("--out", help="report JSON path (default stdout)")
    detect_args(k)
    k.set_defaults(func=cmd_track_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    gc.add_argument("--tolerance", type=float, default=None, help="override every row's tolerance")
    gc.add_argument("--modules", default="", help=f"comma-separated subset of {','.join(gradcheck.MODULES)}")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"svgs-dsgat: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"svgs-dsgat: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, ArithmeticError, RuntimeError) as exc:
        print(f"svgs-dsgat: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
