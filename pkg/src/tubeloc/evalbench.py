"""Evaluation protocols: detection confusion counts, orientation error, latency.

Dataset layout::

    root/images/<stem>.pgm
    root/labels/<stem>.txt      "class cx cy w h [orientation_deg [cx_px cy_px]]" per line
    root/disparity/<stem>.pfm   optional
    root/poses/<stem>.txt       optional, "orientation_deg [cx_px cy_px]"
"""
from __future__ import annotations

import json
import os
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, TubelocError
from .imgcore import BoundingBox, crop, iou, load_pgm, read_pgm_size
from .nnexec.detect import detect
from .posecv import BLOCK, OFFSET, estimate_pose_2d


@dataclass(frozen=True)
class GroundTruthLabel:
    image_id: str
    class_id: int
    cx: float
    cy: float
    w: float
    h: float
    orientation_deg: float | None = None
    centroid_px: tuple | None = None

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"normalised {name}={v} outside [0, 1]")
        if self.w * self.h <= 0:
            raise ValueError("label box has zero area")

    def box(self, width, height) -> BoundingBox:
        return BoundingBox.from_center(self.cx * width, self.cy * height, self.w * width, self.h * height)


def parse_label_line(line: str, image_id: str) -> GroundTruthLabel:
    parts = line.split()
    if len(parts) not in (5, 6, 8):
        raise ValueError(f"expected 5, 6 or 8 columns, got {len(parts)}")
    cls = int(parts[0])
    cx, cy, w, h = (float(p) for p in parts[1:5])
    orient = float(parts[5]) if len(parts) >= 6 else None
    cen = (float(parts[6]), float(parts[7])) if len(parts) == 8 else None
    return GroundTruthLabel(image_id, cls, cx, cy, w, h, orient, cen)


def read_label_file(path, image_id=None) -> list:
    image_id = image_id or os.path.splitext(os.path.basename(path))[0]
    labels = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            try:
                labels.append(parse_label_line(line, image_id))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return labels


def load_labels(directory) -> list:
    """Every label in a directory of ``<stem>.txt`` files, in stem order."""
    out = []
    for name in sorted(os.listdir(directory)):
        if name.endswith(".txt"):
            out.extend(read_label_file(os.path.join(directory, name)))
    return out


@dataclass
class Sample:
    stem: str
    image_path: str
    width: int
    height: int
    labels: list
    disparity_path: str | None = None
    orientation_deg: float | None = None
    centroid_px: tuple | None = None

    def boxes(self) -> list:
        return [l.box(self.width, self.height) for l in self.labels]


def load_dataset(root) -> list:
    img_dir = os.path.join(root, "images")
    if not os.path.isdir(img_dir):
        raise DataError(f"{root}: no images/ directory")
    stems = sorted(os.path.splitext(n)[0] for n in os.listdir(img_dir) if n.endswith(".pgm"))
    if not stems:
        raise DataError(f"{img_dir}: no .pgm images")
    samples = []
    for stem in stems:
        path = os.path.join(img_dir, stem + ".pgm")
        w, h = read_pgm_size(path)
        lab_path = os.path.join(root, "labels", stem + ".txt")
        labels = read_label_file(lab_path, stem) if os.path.exists(lab_path) else []
        s = Sample(stem, path, w, h, labels)
        disp = os.path.join(root, "disparity", stem + ".pfm")
        if os.path.exists(disp):
            s.disparity_path = disp
        pose = os.path.join(root, "poses", stem + ".txt")
        if os.path.exists(pose):
            with open(pose, encoding="utf-8") as fh:
                vals = [float(v) for v in fh.read().split()]
            if len(vals) not in (1, 3):
                raise DataError(f"{pose}: expected 'orientation_deg [cx cy]'")
            s.orientation_deg = vals[0]
            if len(vals) == 3:
                s.centroid_px = (vals[1], vals[2])
        else:
            for l in labels:
                if l.orientation_deg is not None:
                    s.orientation_deg = l.orientation_deg
                    s.centroid_px = l.centroid_px
                    break
        samples.append(s)
    return samples


# ------------------------------------------------------------------ matching

@dataclass
class DetectionMetrics:
    true_positives: int = 0
    false_negatives: int = 0
    false_positives: int = 0
    matches: list = field(default_factory=list)

    def __add__(self, other):
        return DetectionMetrics(self.true_positives + other.true_positives,
                                self.false_negatives + other.false_negatives,
                                self.false_positives + other.false_positives,
                                self.matches + other.matches)

    @property
    def recall(self) -> float:
        n = self.true_positives + self.false_negatives
        return self.true_positives / n if n else 0.0

    def to_json(self) -> dict:
        return {"true_positives": self.true_positives, "false_negatives": self.false_negatives,
                "false_positives": self.false_positives, "recall": self.recall, "matches": self.matches}


def match_detections(detections, labels, iou_threshold=0.5, image=None) -> DetectionMetrics:
    """Greedy matching of detections, by descending confidence, to ground-truth boxes.

    ``labels`` are :class:`BoundingBox` objects in the detections' frame.
    """
    free = list(range(len(labels)))
    tp = fp = 0
    records = []
    for det in sorted(detections, key=lambda d: -d.confidence):
        best, best_iou = None, iou_threshold
        for k in free:
            o = iou(det.box, labels[k])
            if o >= best_iou:
                best, best_iou = k, o
        if best is None:
            fp += 1
            records.append({"image": image, "confidence": det.confidence, "label": None, "iou": None})
        else:
            free.remove(best)
            tp += 1
            records.append({"image": image, "confidence": det.confidence, "label": best, "iou": best_iou})
    return DetectionMetrics(tp, len(free), fp, records)


# --------------------------------------------------------------- orientation

def orientation_error(est_deg: float, gt_deg: float) -> float:
    d = abs(float(est_deg) - float(gt_deg)) % 180.0
    return min(d, 180.0 - d)


@dataclass
class OrientationStats:
    errors: np.ndarray
    mean: float
    std: float
    std_sample: float
    histogram: np.ndarray  # counts in 5-degree bins over [0, 90]
    frac_under_5: float

    def to_json(self) -> dict:
        return {"n": int(self.errors.size), "mean_deg": self.mean, "std_deg": self.std,
                "std_sample_deg": self.std_sample, "max_deg": float(self.errors.max()),
                "frac_under_5": self.frac_under_5,
                "histogram_5deg": [int(v) for v in self.histogram]}


def aggregate_orientation(errors) -> OrientationStats:
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("no orientation errors to aggregate")
    hist, _ = np.histogram(e, bins=np.arange(0, 95, 5))
    return OrientationStats(e, float(e.mean()), float(e.std()),
                            float(e.std(ddof=1)) if e.size > 1 else 0.0, hist,
                            float(np.mean(e < 5.0)))


def run_pose_eval(samples, block=BLOCK, offset=OFFSET, pad=0):
    """Orientation errors on samples carrying a ground-truth orientation.

    The crop is the labelled box (grown by ``pad`` pixels) or the whole image
    when unlabelled; the centroid is the recorded one, else the box centre.
    Failures are scored as the maximum 90 degree error.
    """
    errors, failures = [], []
    for s in samples:
        if s.orientation_deg is None:
            continue
        image = load_pgm(s.image_path)
        if s.labels:
            b = s.boxes()[0]
            region = crop(image, BoundingBox(b.x - pad, b.y - pad, b.w + 2 * pad, b.h + 2 * pad))
        else:
            region = image
        cen = s.centroid_px or (region.origin[0] + region.width / 2, region.origin[1] + region.height / 2)
        local = (cen[0] - region.origin[0], cen[1] - region.origin[1])
        try:
            pose = estimate_pose_2d(region, local, block, offset)
            errors.append(orientation_error(pose.orientation_deg, s.orientation_deg))
        except TubelocError as exc:
            failures.append({"image": s.stem, "error": str(exc)})
            errors.append(90.0)
    return aggregate_orientation(errors), failures


# ------------------------------------------------------------------ eval run

@dataclass
class EvalResult:
    metrics: DetectionMetrics
    per_image: list
    errors: list
    settings: dict

    def to_json(self) -> dict:
        return {"settings": self.settings, "metrics": self.metrics.to_json(),
                "per_image": self.per_image, "errors": self.errors}


def table_text(columns: dict) -> str:
    """Aligned confusion table with one column per named result."""
    names = list(columns)
    rows = [("True Positives", "true_positives"), ("False Negatives", "false_negatives"),
            ("False Positives", "false_positives")]
    width = max([len(n) for n in names] + [8])
    lines = [" " * 17 + "".join(f"{n:>{width + 2}}" for n in names)]
    for label, key in rows:
        lines.append(f"{label:<17}" + "".join(f"{getattr(columns[n], key):>{width + 2}d}" for n in names))
    return "\n".join(lines) + "\n"


def run_eval(model, samples, conf=0.75, iou_threshold=0.5, nms_iou=0.45, out_dir=None, name=None) -> EvalResult:
    """Detect on every sample, match against labels and aggregate.

    Per-image failures are recorded and skipped. With ``out_dir`` the result
    is written as ``eval.json`` and ``eval.txt``.
    """
    total = DetectionMetrics()
    per_image, errors = [], []
    for s in samples:
        try:
            dets = detect(model, load_pgm(s.image_path), conf, nms_iou)
        except (TubelocError, OSError) as exc:
            errors.append({"image": s.stem, "error": str(exc)})
            continue
        m = match_detections(dets, s.boxes(), iou_threshold, image=s.stem)
        total = total + m
        per_image.append({"image": s.stem, "tp": m.true_positives, "fn": m.false_negatives,
                          "fp": m.false_positives, "n_detections": len(dets)})
    name = name or getattr(model, "name", "model")
    settings = {"model": name, "path": getattr(model, "kind", "float"), "conf": conf,
                "iou": iou_threshold, "nms_iou": nms_iou, "n_images": len(samples)}
    result = EvalResult(total, per_image, errors, settings)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "eval.json"), "w") as fh:
            json.dump(result.to_json(), fh, indent=2)
        with open(os.path.join(out_dir, "eval.txt"), "w") as fh:
            fh.write(table_text({f"{name} ({settings['path']})": total}))
    return result


# -------------------------------------------------------------------- bench

@dataclass(frozen=True)
class BenchRow:
    model: str
    path: str
    mean_ms: float
    std_ms: float
    iterations: int
    warmup: int

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)

    def find(self, model, path=None):
        for r in self.rows:
            if r.model == model and (path is None or r.path == path):
                return r
        raise KeyError(model)

    def ratio(self, slow, fast, path=None) -> float:
        return self.find(slow, path).mean_ms / self.find(fast, path).mean_ms

    def to_json(self) -> dict:
        return {"rows": [r.to_json() for r in self.rows]}

    def to_text(self) -> str:
        lines = [f"{'model':<20}{'path':<8}{'mean ms':>12}{'std ms':>10}{'iters':>7}"]
        for r in self.rows:
            lines.append(f"{r.model:<20}{r.path:<8}{r.mean_ms:>12.2f}{r.std_ms:>10.2f}{r.iterations:>7d}")
        by_path = {}
        for r in self.rows:
            by_path.setdefault(r.path, []).append(r)
        for path, rows in by_path.items():
            if len(rows) >= 2:
                fast = min(rows, key=lambda r: r.mean_ms)
                for r in rows:
                    if r is not fast:
                        lines.append(f"ratio {r.model}/{fast.model} ({path}): {r.mean_ms / fast.mean_ms:.2f}x")
        return "\n".join(lines) + "\n"


def bench_inference(model, images, warmup=5, iters=50, report=None, conf=0.75) -> BenchReport:
    """Time single-image forward pass plus decode on a monotonic clock.

    Images cycle if fewer than ``warmup + iters``. Appends a row to ``report``
    when given.
    """
    from .imgcore import letterbox
    from .nnexec.decode import YoloHeadConfig, yolo_decode
    from .nnexec.ops import image_to_tensor

    images = list(images)
    if not images:
        raise DataError("benchmark needs at least one image")
    if iters < 10:
        raise ValueError("at least 10 timed iterations are required")
    net = model.net
    prepared = []
    for im in images:
        boxed, tf = letterbox(im, net.width)
        prepared.append((image_to_tensor(boxed), tf))
    configs = [YoloHeadConfig.from_layer(l, net) for l in net.yolo_layers]

    def once(k):
        tensor, tf = prepared[k % len(prepared)]
        heads = model.forward(tensor)
        for head, cfg in zip(heads, configs):
            yolo_decode(head, cfg, tf, conf)

    for k in range(warmup):
        once(k)
    times = []
    for k in range(iters):
        t0 = time.perf_counter()
        once(k)
        times.append((time.perf_counter() - t0) * 1000.0)
    row = BenchRow(getattr(model, "name", "model"), getattr(model, "kind", "float"),
                   statistics.fmean(times), statistics.pstdev(times), iters, warmup)
    report = report if report is not None else BenchReport()
    report.rows.append(row)
    return report
