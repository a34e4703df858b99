"""Detection decoding, IoU matching and the accuracy metrics (AP, AR, F1, RE, AE)."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PolarGridSpec
from .loss import TargetMaps
from .tensor import Tensor

THRESHOLDS = tuple(k / 10 for k in range(1, 10))


@dataclass(frozen=True)
class GtObject:
    range: float
    azimuth: float


@dataclass(frozen=True)
class Detection:
    range: float
    azimuth: float
    confidence: float
    cell: tuple = (-1, -1)


@dataclass(frozen=True)
class BoxTemplate:
    length: float = 4.0
    width: float = 1.8

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ValueError("box template dimensions must be positive")


@dataclass
class MetricsReport:
    ap: float
    ar: float
    f1: float
    range_error: float
    angle_error: float
    table: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"AP": self.ap, "AR": self.ar, "F1": self.f1, "RE": self.range_error, "AE": self.angle_error}


# ---------------------------------------------------------------------------
# maps <-> objects


def _map_arrays(maps):
    cls, reg = (maps.cls, maps.reg) if hasattr(maps, "cls") else maps
    cls = cls.data if isinstance(cls, Tensor) else np.asarray(cls)
    reg = reg.data if isinstance(reg, Tensor) else np.asarray(reg)
    return cls, reg


def local_peaks(score: np.ndarray) -> np.ndarray:
    """3x3 local maxima of a 2-D map; equal neighbours are won by the lower (i, j) index."""
    h, w = score.shape
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = score
    keep = np.ones((h, w), dtype=bool)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            nb = padded[1 + di:1 + di + h, 1 + dj:1 + dj + w]
            lower = di < 0 or (di == 0 and dj < 0)
            keep &= (nb <= score) if not lower else (nb < score)
    return keep


def decode_detections(maps, confidence_threshold: float = 0.5, grid: PolarGridSpec | None = None) -> list:
    if not 0 < confidence_threshold < 1:
        raise ValueError("confidence threshold must be in (0, 1)")
    cls, reg = _map_arrays(maps)
    score = cls.reshape(cls.shape[-2:])
    if grid is not None and score.shape != (grid.n_range, grid.n_azimuth):
        raise ValueError(f"map {score.shape} does not match grid {grid.n_range}x{grid.n_azimuth}")
    reg = reg.reshape((2,) + score.shape)
    hits = local_peaks(score) & (score >= confidence_threshold)
    return [
        Detection(float(reg[0, i, j]), float(reg[1, i, j]), float(score[i, j]), (int(i), int(j)))
        for i, j in zip(*np.nonzero(hits))
    ]


def encode_targets(gts, grid: PolarGridSpec, dtype=np.float32) -> TargetMaps:
    """Occupancy at the cell containing each object centre; regression holds (range m, azimuth deg)."""
    y_cls = np.zeros((1, grid.n_range, grid.n_azimuth), dtype=dtype)
    y_reg = np.zeros((2, grid.n_range, grid.n_azimuth), dtype=dtype)
    for g in gts:
        i, j = grid.polar_to_cell(g.range, g.azimuth)
        if not grid.contains_cell(i, j):
            raise ValueError(f"object {g} lies outside the detection grid")
        y_cls[0, i, j] = 1
        y_reg[:, i, j] = (g.range, g.azimuth)
    return TargetMaps(y_cls, y_reg)


# ---------------------------------------------------------------------------
# boxes and matching


def detection_to_box(d, tpl: BoxTemplate = BoxTemplate()) -> tuple:
    """Axis-aligned (xmin, xmax, ymin, ymax) in vehicle metres around the polar point."""
    t = math.radians(d.azimuth)
    x, y = d.range * math.cos(t), d.range * math.sin(t)
    return (x - tpl.length / 2, x + tpl.length / 2, y - tpl.width / 2, y + tpl.width / 2)


def iou(a, b) -> float:
    area_a = (a[1] - a[0]) * (a[3] - a[2])
    area_b = (b[1] - b[0]) * (b[3] - b[2])
    if area_a <= 0 or area_b <= 0:
        raise ValueError("IoU of a zero-area box is undefined")
    ix = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[2], b[2]))
    inter = ix * iy
    return inter / (area_a + area_b - inter)


def match_detections(preds, gts, iou_threshold: float = 0.5, tpl: BoxTemplate = BoxTemplate()):
    """Greedy matching in descending confidence. Returns (tp_pairs, fp_list, fn_list)."""
    order = sorted(range(len(preds)), key=lambda k: (-preds[k].confidence, k))
    gt_boxes = [detection_to_box(g, tpl) for g in gts]
    taken = [False] * len(gts)
    tps, fps = [], []
    for k in order:
        p = preds[k]
        pb = detection_to_box(p, tpl)
        best, best_iou = -1, -1.0
        for gi, gb in enumerate(gt_boxes):
            if taken[gi]:
                continue
            v = iou(pb, gb)
            if v > best_iou:
                best, best_iou = gi, v
        if best >= 0 and best_iou >= iou_threshold:
            taken[best] = True
            tps.append((p, gts[best]))
        else:
            fps.append(p)
    fns = [g for g, t in zip(gts, taken) if not t]
    return tps, fps, fns


# ---------------------------------------------------------------------------
# metrics


def f1(ap: float, ar: float) -> float:
    return 0.0 if ap + ar == 0 else 2 * ap * ar / (ap + ar)


def range_angle_errors(pairs) -> tuple:
    """Mean absolute range (m) and azimuth (deg) error over matched pairs; NaN when there are none."""
    pairs = list(pairs)
    if not pairs:
        return math.nan, math.nan
    re = sum(abs(g.range - p.range) for p, g in pairs)
    ae = sum(abs(g.azimuth - p.azimuth) for p, g in pairs)
    return re / len(pairs), ae / len(pairs)


def _ratio(num, den, empty):
    return empty if den == 0 else num / den


def compute_ap_ar(frames, iou_threshold: float = 0.5, tpl: BoxTemplate = BoxTemplate(), thresholds=THRESHOLDS):
    """Sweep confidence thresholds; returns (AP %, AR %, per-threshold rows).

    Counts are pooled over frames per threshold. Precision with no predictions is
    1 when there is also nothing to find, else 0; recall with no objects is 1.
    """
    table = []
    for t in thresholds:
        tp = fp = fn = 0
        pairs = []
        for preds, gts in frames:
            kept = [p for p in preds if p.confidence >= t]
            m, f, n = match_detections(kept, gts, iou_threshold, tpl)
            tp, fp, fn = tp + len(m), fp + len(f), fn + len(n)
            pairs.extend(m)
        precision = _ratio(tp, tp + fp, 1.0 if tp + fn == 0 else 0.0)
        recall = _ratio(tp, tp + fn, 1.0)
        re, ae = range_angle_errors(pairs)
        table.append({"threshold": t, "tp": tp, "fp": fp, "fn": fn, "precision": precision,
                      "recall": recall, "range_error": re, "angle_error": ae})
    ap = 100.0 * float(np.mean([r["precision"] for r in table]))
    ar = 100.0 * float(np.mean([r["recall"] for r in table]))
    return ap, ar, table


def evaluate(frames, iou_threshold: float = 0.5, tpl: BoxTemplate = BoxTemplate()) -> MetricsReport:
    frames = list(frames)
    ap, ar, table = compute_ap_ar(frames, iou_threshold, tpl)
    res = [r["range_error"] for r in table if not math.isnan(r["range_error"])]
    aes = [r["angle_error"] for r in table if not math.isnan(r["angle_error"])]
    re = float(np.mean(res)) if res else math.nan
    ae = float(np.mean(aes)) if aes else math.nan
    return MetricsReport(ap, ar, f1(ap, ar), re, ae, table)


# ---------------------------------------------------------------------------
# files

DET_FIELDS = ["frame_id", "range_m", "azimuth_deg", "confidence"]
GT_FIELDS = DET_FIELDS[:3]


def write_detections_csv(path, rows):
    """``rows`` are (frame_id, Detection) or (frame_id, GtObject); the header follows the first kind."""
    rows = list(rows)
    is_gt = bool(rows) and not hasattr(rows[0][1], "confidence")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GT_FIELDS if is_gt else DET_FIELDS)
        for fid, d in rows:
            line = [fid, repr(float(d.range)), repr(float(d.azimuth))]
            if not is_gt:
                line.append(repr(float(d.confidence)))
            w.writerow(line)


def read_detections_csv(path) -> dict:
    """Return {frame_id: [Detection | GtObject]} (GtObject when there is no confidence column)."""
    out: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(GT_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        has_conf = "confidence" in reader.fieldnames
        for row in reader:
            r, a = float(row["range_m"]), float(row["azimuth_deg"])
            obj = Detection(r, a, float(row["confidence"])) if has_conf else GtObject(r, a)
            out.setdefault(row["frame_id"], []).append(obj)
    return out


def format_report(report: MetricsReport) -> str:
    lines = [
        f"AP(%) {report.ap:8.2f}   AR(%) {report.ar:8.2f}   F1(%) {report.f1:8.2f}",
        f"RE(m) {report.range_error:8.4f}   AE(deg) {report.angle_error:8.4f}",
        "",
        f"{'thr':>5} {'TP':>6} {'FP':>6} {'FN':>6} {'precision':>10} {'recall':>10}",
    ]
    for r in report.table:
        lines.append(f"{r['threshold']:5.1f} {r['tp']:6d} {r['fp']:6d} {r['fn']:6d} "
                     f"{r['precision']:10.4f} {r['recall']:10.4f}")
    return "\n".join(lines) + "\n"


def write_key_values(path, values: dict):
    Path(path).write_text("".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n"
                                  for k, v in values.items()))


def read_key_values(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out
