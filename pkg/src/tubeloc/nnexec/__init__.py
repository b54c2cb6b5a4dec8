"""Float and 8-bit execution of Darknet YOLO networks."""

from .decode import Detection, YoloHeadConfig, nms, yolo_decode
from .detect import CONF_THRESHOLD, NMS_IOU, detect, detections_to_jsonl
from .model import Model, forward
from .ops import activate, conv2d, image_to_tensor, maxpool2d, route_concat, upsample2x
from .quant import (Calibration, QuantizedModel, QuantParams, QuantTensor, affine_params, calibrate,
                    quantize_network, symmetric_params)

__all__ = [
    "Calibration", "CONF_THRESHOLD", "Detection", "Model", "NMS_IOU", "QuantParams", "QuantTensor",
    "QuantizedModel", "YoloHeadConfig", "activate", "affine_params", "calibrate", "conv2d", "detect",
    "detections_to_jsonl", "forward", "image_to_tensor", "maxpool2d", "nms", "quantize_network",
    "route_concat", "symmetric_params", "upsample2x", "yolo_decode",
]
