"""End-to-end detection: letterbox, forward pass, decode, suppression."""
from __future__ import annotations

import json

from ..imgcore import GrayImage, letterbox
from .decode import YoloHeadConfig, nms, yolo_decode
from .ops import image_to_tensor

CONF_THRESHOLD = 0.75
NMS_IOU = 0.45


def detect(model, image: GrayImage, conf_threshold=CONF_THRESHOLD, nms_iou=NMS_IOU) -> list:
    """Detections in ``image`` pixel coordinates, highest confidence first.

    ``model`` may be a float :class:`Model` or a :class:`QuantizedModel`.
    """
    net = model.net
    boxed, tf = letterbox(image, net.width)
    heads = model.forward(image_to_tensor(boxed, net.width))
    found = []
    for head, layer in zip(heads, net.yolo_layers):
        found.extend(yolo_decode(head, YoloHeadConfig.from_layer(layer, net), tf, conf_threshold))
    return nms(found, nms_iou)


def detections_to_jsonl(detections, image=None) -> str:
    return "".join(json.dumps(d.to_json(image)) + "\n" for d in detections)
