"""YOLO head decoding and non-maximum suppression."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..errors import EmptyDetectionError
from ..imgcore import BoundingBox, LetterboxTransform, iou, unletterbox_box


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    confidence: float
    class_id: int = 0

    def to_json(self, image=None) -> dict:
        rec = {"image": image, "class_id": int(self.class_id),
               "confidence": float(self.confidence), "box": self.box.as_list()}
        return rec


@dataclass(frozen=True)
class YoloHeadConfig:
    anchors: tuple  # ((w, h), ...) in network pixels
    mask: tuple
    classes: int
    grid: tuple  # (rows, cols)
    net_size: tuple = (416, 416)  # (width, height)

    @classmethod
    def from_layer(cls, layer, net):
        return cls(tuple(layer.anchors), tuple(layer.mask), layer.classes,
                   tuple(layer.in_shape[1:]), (net.width, net.height))

    @property
    def stride(self) -> tuple:
        return (self.net_size[0] / self.grid[1], self.net_size[1] / self.grid[0])


MAX_LOG_SCALE = 20.0  # caps exp(tw) so degenerate heads cannot overflow


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def decode_boxes(head, config: YoloHeadConfig):
    """Vectorised decode of every cell and anchor.

    Returns ``(cx, cy, w, h, confidence, class_id)`` arrays of shape
    (anchors, rows, cols) in network pixel coordinates.
    """
    n_a = len(config.mask)
    rows, cols = config.grid
    if head.shape != (n_a * (5 + config.classes), rows, cols):
        raise ValueError(f"head shape {head.shape} inconsistent with {n_a} anchors, "
                         f"{config.classes} classes, grid {config.grid}")
    t = np.asarray(head, dtype=np.float64).reshape(n_a, 5 + config.classes, rows, cols)
    sx, sy = config.stride
    jj = np.arange(cols)[None, None, :]
    ii = np.arange(rows)[None, :, None]
    anchors = np.array([config.anchors[m] for m in config.mask], dtype=np.float64)
    cx = (sigmoid(t[:, 0]) + jj) * sx
    cy = (sigmoid(t[:, 1]) + ii) * sy
    w = anchors[:, 0, None, None] * np.exp(np.minimum(t[:, 2], MAX_LOG_SCALE))
    h = anchors[:, 1, None, None] * np.exp(np.minimum(t[:, 3], MAX_LOG_SCALE))
    obj = sigmoid(t[:, 4])
    cls = sigmoid(t[:, 5:])
    class_id = cls.argmax(axis=1)
    conf = obj * cls.max(axis=1)
    return cx, cy, w, h, conf, class_id


def yolo_decode(head, config: YoloHeadConfig, transform: LetterboxTransform | None = None,
                threshold: float = 0.0) -> list:
    """Detections with confidence >= ``threshold``.

    Boxes are mapped back to source-image pixels through ``transform``; boxes
    falling entirely in the letterbox padding are dropped.
    """
    cx, cy, w, h, conf, class_id = decode_boxes(head, config)
    out = []
    for a, i, j in zip(*np.nonzero(conf >= threshold)):
        box = BoundingBox.from_center(cx[a, i, j], cy[a, i, j], w[a, i, j], h[a, i, j])
        if transform is not None:
            try:
                box = unletterbox_box(box, transform)
            except EmptyDetectionError:
                continue
        out.append(Detection(box, float(conf[a, i, j]), int(class_id[a, i, j])))
    return out


def nms(detections, iou_threshold: float = 0.45) -> list:
    """Greedy suppression in descending confidence order."""
    order = sorted(detections, key=lambda d: -d.confidence)
    if len(order) < 2:
        return order
    boxes = np.array([[d.box.x, d.box.y, d.box.x2, d.box.y2] for d in order])
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for k in range(len(order)):
        if not alive[k]:
            continue
        keep.append(order[k])
        rest = np.nonzero(alive[k + 1:])[0] + k + 1
        if rest.size == 0:
            break
        iw = np.minimum(boxes[k, 2], boxes[rest, 2]) - np.maximum(boxes[k, 0], boxes[rest, 0])
        ih = np.minimum(boxes[k, 3], boxes[rest, 3]) - np.maximum(boxes[k, 1], boxes[rest, 1])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        ov = inter / (areas[k] + areas[rest] - inter)
        alive[rest[ov > iou_threshold]] = False
    return keep


__all__ = ["Detection", "YoloHeadConfig", "yolo_decode", "nms", "decode_boxes", "sigmoid", "iou"]
