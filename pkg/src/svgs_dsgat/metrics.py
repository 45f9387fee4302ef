"""Detection (COCO-style AP) and tracking (CLEAR-MOT) evaluation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

IOU_SWEEP = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
# half-open [lo, hi) area buckets in square pixels
AREA_RANGES = {"all": (0.0, np.inf), "small": (0.0, 32.0**2), "medium": (32.0**2, 96.0**2), "large": (96.0**2, np.inf)}
METRIC_COLUMNS = ("mAP", "AP50", "AP75", "AP_S", "AP_M", "AP_L")


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got {self.w}x{self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: Box
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    box: Box
    class_id: int


@dataclass(frozen=True)
class TrackedBox:
    frame: int
    track_id: int
    box: Box
    class_id: int = 0
    score: float = 1.0


def iou(a: Box, b: Box) -> float:
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def ground_truth_from(ann) -> list[GroundTruth]:
    """Flatten an AnnotationSet into GroundTruth records."""
    return [
        GroundTruth(r.image_id, Box(b.x, b.y, b.w, b.h), b.class_id)
        for r in ann.records for b in r.boxes
    ]


# ---------------------------------------------------------------------------
# average precision
# ---------------------------------------------------------------------------


def _match_image(dets: list[Detection], gts: list[GroundTruth], iou_thr: float, area_rng) -> list[tuple[float, int]]:
    """(score, outcome) per detection; outcome 1 = TP, 0 = FP, -1 = ignored."""
    lo, hi = area_rng
    ignored = [not (lo <= g.box.area < hi) for g in gts]
    used = [False] * len(gts)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    out = []
    for i in order:
        d = dets[i]
        best = None
        for want_ignored in (False, True):
            best_iou = iou_thr
            for j, g in enumerate(gts):
                if used[j] or ignored[j] != want_ignored:
                    continue
                v = iou(d.box, g.box)
                if v >= best_iou and (best is None or v > best_iou):
                    best, best_iou = j, v
            if best is not None:
                break
        if best is not None:
            used[best] = True
            out.append((d.score, -1 if ignored[best] else 1))
        elif not (lo <= d.box.area < hi):
            out.append((d.score, -1))
        else:
            out.append((d.score, 0))
    return out


def _ap_from_outcomes(outcomes: list[tuple[float, int]], npos: int) -> float:
    if npos == 0:
        return float("nan")
    kept = [(s, o) for s, o in outcomes if o >= 0]
    if not kept:
        return 0.0
    scores = np.array([s for s, _ in kept])
    tp = np.array([o for _, o in kept], dtype=np.float64)
    order = np.argsort(-scores, kind="mergesort")
    tp = tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / npos
    precision = ctp / (ctp + cfp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(sampled.mean())


def average_precision(dets: Iterable[Detection], gts: Iterable[GroundTruth], class_id: int,
                      iou_thr: float = 0.5, area: str | tuple = "all") -> float:
    """101-point interpolated AP for one class; NaN when the class has no
    (non-ignored) ground truth.

    Detections are greedily matched, in descending score order per image, to
    the highest-IoU unmatched ground truth at or above ``iou_thr``. Ground
    truth outside the ``area`` bucket is ignored rather than counted.
    """
    rng = AREA_RANGES[area] if isinstance(area, str) else area
    by_img_d: dict[str, list[Detection]] = {}
    by_img_g: dict[str, list[GroundTruth]] = {}
    for d in dets:
        if d.class_id == class_id:
            by_img_d.setdefault(d.image_id, []).append(d)
    for g in gts:
        if g.class_id == class_id:
            by_img_g.setdefault(g.image_id, []).append(g)
    npos = sum(1 for gs in by_img_g.values() for g in gs if rng[0] <= g.box.area < rng[1])
    outcomes: list[tuple[float, int]] = []
    for img in sorted(set(by_img_d) | set(by_img_g)):
        outcomes += _match_image(by_img_d.get(img, []), by_img_g.get(img, []), iou_thr, rng)
    return _ap_from_outcomes(outcomes, npos)


def _nanmean(values) -> float:
    arr = np.array([v for v in values if not np.isnan(v)])
    return float(arr.mean()) if arr.size else float("nan")


def map_suite(dets: Sequence[Detection], gts: Sequence[GroundTruth], classes: Sequence[int] | None = None) -> dict:
    """mAP over IoU 0.50:0.05:0.95, AP50, AP75 and AP by size, overall and per class."""
    dets, gts = list(dets), list(gts)
    if classes is None:
        classes = sorted({g.class_id for g in gts} | {d.class_id for d in dets})
    table: dict[tuple[str, int, float], float] = {}
    for area in ("all", "small", "medium", "large"):
        for c in classes:
            for t in IOU_SWEEP:
                table[area, c, round(float(t), 2)] = average_precision(dets, gts, c, float(t), area)
    sweep = [round(float(t), 2) for t in IOU_SWEEP]

    def summary(cls_list):
        return {
            "mAP": _nanmean(table["all", c, t] for c in cls_list for t in sweep),
            "AP50": _nanmean(table["all", c, 0.5] for c in cls_list),
            "AP75": _nanmean(table["all", c, 0.75] for c in cls_list),
            "AP_S": _nanmean(table["small", c, t] for c in cls_list for t in sweep),
            "AP_M": _nanmean(table["medium", c, t] for c in cls_list for t in sweep),
            "AP_L": _nanmean(table["large", c, t] for c in cls_list for t in sweep),
        }

    out = summary(list(classes))
    out["per_class"] = {int(c): summary([c]) for c in classes}
    return out


# ---------------------------------------------------------------------------
# tracking
# ---------------------------------------------------------------------------


def clear_mot(hyp: Sequence[TrackedBox], gt: Sequence[TrackedBox], iou_thr: float = 0.5) -> dict:
    """CLEAR-MOT accounting with IoU similarity.

    Per frame, pairings from the previous frame are kept while their IoU stays
    at or above the threshold; the rest are matched greedily by descending
    IoU (ties: lower GT id, then lower hypothesis id). An ID switch is
    counted when a GT track is matched to a hypothesis id different from the
    one it was last matched to.
    """
    if not gt:
        raise ValueError("CLEAR-MOT is undefined without ground truth")
    frames = sorted({b.frame for b in gt} | {b.frame for b in hyp})
    gt_by = {f: [] for f in frames}
    hyp_by = {f: [] for f in frames}
    for b in gt:
        gt_by[b.frame].append(b)
    for b in hyp:
        hyp_by[b.frame].append(b)
    last: dict[int, int] = {}
    prev: dict[int, int] = {}
    fp = fn = idsw = n_gt = 0
    iou_sum = 0.0
    n_match = 0
    for f in frames:
        G = sorted(gt_by[f], key=lambda b: b.track_id)
        H = sorted(hyp_by[f], key=lambda b: b.track_id)
        h_index = {b.track_id: i for i, b in enumerate(H)}
        used_h: set[int] = set()
        matched: dict[int, tuple[int, float]] = {}
        for gi, g in enumerate(G):
            hid = prev.get(g.track_id)
            if hid is None or hid not in h_index or h_index[hid] in used_h:
                continue
            v = iou(g.box, H[h_index[hid]].box)
            if v >= iou_thr:
                matched[gi] = (h_index[hid], v)
                used_h.add(h_index[hid])
        pairs = []
        for gi, g in enumerate(G):
            if gi in matched:
                continue
            for hi, h in enumerate(H):
                if hi in used_h:
                    continue
                v = iou(g.box, h.box)
                if v >= iou_thr:
                    pairs.append((-v, g.track_id, h.track_id, gi, hi))
        for negv, _, _, gi, hi in sorted(pairs):
            if gi in matched or hi in used_h:
                continue
            matched[gi] = (hi, -negv)
            used_h.add(hi)
        prev = {}
        for gi, (hi, v) in matched.items():
            gid, hid = G[gi].track_id, H[hi].track_id
            if gid in last and last[gid] != hid:
                idsw += 1
            last[gid] = hid
            prev[gid] = hid
            iou_sum += v
            n_match += 1
        fp += len(H) - len(matched)
        fn += len(G) - len(matched)
        n_gt += len(G)
    return {
        "MOTA": 1.0 - (fn + fp + idsw) / n_gt,
        "MOTP": iou_sum / n_match if n_match else float("nan"),
        "IDSW": idsw,
        "FP": fp,
        "FN": fn,
        "GT": n_gt,
        "matches": n_match,
    }


def nodes_to_boxes(scores, g, threshold: float = 0.5) -> list[Detection]:
    """Boxes around 4-connected runs of patches scoring >= threshold, per class.

    Each box is the patch-aligned bounding box of one component; its score is
    the component's mean node score. ``g`` may be a batch of grids.
    """
    scores = np.asarray(getattr(scores, "data", scores), dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != g.num_nodes:
        raise ValueError("scores must be (num_nodes, classes)")
    if not g.grids:
        raise ValueError("nodes_to_boxes needs grid geometry")
    ids = list(g.image_ids) if g.image_ids else [str(i) for i in range(len(g.grids))]
    out = []
    for comp, (grid, start) in enumerate(zip(g.grids, g.offsets)):
        block = scores[start:start + grid.rows * grid.cols]
        p = grid.patch_size
        for c in range(scores.shape[1]):
            plane = block[:, c].reshape(grid.rows, grid.cols)
            labels, n = ndimage.label(plane >= threshold)
            for lab in range(1, n + 1):
                rr, cc = np.nonzero(labels == lab)
                box = Box(float(cc.min() * p), float(rr.min() * p),
                          float((cc.max() - cc.min() + 1) * p), float((rr.max() - rr.min() + 1) * p))
                out.append(Detection(ids[comp], box, c, float(np.clip(plane[rr, cc].mean(), 0.0, 1.0))))
    return out


def suppress_overlaps(dets: Sequence[Detection], iou_thr: float = 0.5) -> list[Detection]:
    """Class-agnostic greedy non-maximum suppression within each image."""
    keep: list[Detection] = []
    for d in sorted(dets, key=lambda d: -d.score):
        if all(k.image_id != d.image_id or iou(k.box, d.box) < iou_thr for k in keep):
            keep.append(d)
    return keep


def greedy_tracker(per_frame: Sequence[Sequence[Detection]], iou_thr: float = 0.3, max_age: int = 2,
                   frames: Sequence[int] | None = None) -> list[TrackedBox]:
    """Frame-by-frame greedy IoU association.

    Pairs at or above ``iou_thr`` are taken in order of (higher IoU, lower
    track id, lower detection index). Unmatched detections open new tracks;
    a track unmatched for more than ``max_age`` consecutive frames is dropped.
    """
    frames = list(range(len(per_frame))) if frames is None else list(frames)
    tracks: list[dict] = []
    next_id = 0
    out: list[TrackedBox] = []
    for f, dets in zip(frames, per_frame):
        pairs = []
        for ti, t in enumerate(tracks):
            for di, d in enumerate(dets):
                v = iou(t["box"], d.box)
                if v >= iou_thr:
                    pairs.append((-v, t["id"], di, ti))
        used_t: set[int] = set()
        assigned: dict[int, int] = {}
        for _, _, di, ti in sorted(pairs):
            if ti in used_t or di in assigned:
                continue
            used_t.add(ti)
            assigned[di] = ti
        for di, d in enumerate(dets):
            if di in assigned:
                t = tracks[assigned[di]]
                t["box"], t["age"] = d.box, 0
            else:
                t = {"id": next_id, "box": d.box, "age": 0}
                next_id += 1
                tracks.append(t)
                used_t.add(len(tracks) - 1)
            out.append(TrackedBox(f, t["id"], d.box, d.class_id, d.score))
        survivors = []
        for ti, t in enumerate(tracks):
            if ti not in used_t:
                t["age"] += 1
            if t["age"] <= max_age:
                survivors.append(t)
        tracks = survivors
    return out


def tracks_from_annotations(ann) -> list[TrackedBox]:
    out = []
    for i, r in enumerate(ann.records):
        frame = r.frame if r.frame is not None else i
        for b in r.boxes:
            if b.track_id is None:
                raise ValueError(f"{r.image_id}: box without a track id")
            out.append(TrackedBox(frame, int(b.track_id), Box(b.x, b.y, b.w, b.h), b.class_id))
    return out
