"""Post-training 8-bit quantization and integer execution.

Scheme: per-tensor affine int8 activations, per-tensor symmetric int8
weights, int32 bias, and fixed-point requantization (a 31-bit multiplier
and a right shift applied in int64). Rounding is half away from zero.
Leaky activations become ReLU, as the accelerator toolchain requires.

Integer convolutions are evaluated with float64 matrix products. Every
operand is an integer below 2**8 in magnitude and each dot product has at
most a few thousand terms, so all partial sums stay far below 2**53 and the
result is exactly the int32 accumulation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..darknet import fold_batchnorm
from ..errors import DataError, ShapeError, TubelocError
from ..imgcore import GrayImage, letterbox
from .model import Model
from .ops import im2col, image_to_tensor, maxpool2d, route_concat, upsample2x

QMIN, QMAX = -128, 127
INT32_MIN, INT32_MAX = -(2 ** 31), 2 ** 31 - 1


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not QMIN <= self.zero_point <= QMAX:
            raise ValueError(f"zero point {self.zero_point} outside int8 range")

    def quantize(self, x) -> np.ndarray:
        q = round_half_away(np.asarray(x, dtype=np.float64) / self.scale) + self.zero_point
        return np.clip(q, QMIN, QMAX).astype(np.int8)

    def dequantize(self, q) -> np.ndarray:
        return (self.scale * (np.asarray(q, dtype=np.float64) - self.zero_point)).astype(np.float32)

    @property
    def range(self) -> tuple:
        return (self.scale * (QMIN - self.zero_point), self.scale * (QMAX - self.zero_point))


@dataclass(frozen=True, eq=False)
class QuantTensor:
    values: np.ndarray  # int8, (c, h, w)
    params: QuantParams

    @property
    def shape(self):
        return self.values.shape

    def dequantize(self) -> np.ndarray:
        return self.params.dequantize(self.values)


def affine_params(lo: float, hi: float) -> QuantParams:
    """Asymmetric params covering [lo, hi] extended to include zero."""
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    if hi - lo <= 0:
        return QuantParams(1.0, 0)
    scale = (hi - lo) / 255.0
    zp = int(np.clip(round_half_away(QMIN - lo / scale), QMIN, QMAX))
    return QuantParams(scale, zp)


def symmetric_params(values) -> QuantParams:
    m = float(np.max(np.abs(values))) if np.size(values) else 0.0
    return QuantParams(m / 127.0 if m > 0 else 1.0, 0)


INPUT_PARAMS = QuantParams(1.0 / 255.0, -128)


def _as_tensor(item, net):
    if isinstance(item, GrayImage):
        if (item.width, item.height) != (net.width, net.height):
            item, _ = letterbox(item, net.width)
        return image_to_tensor(item)
    return np.asarray(item, dtype=np.float32)


class Calibration(dict):
    """Maps tensor names to :class:`QuantParams`.

    Names are ``input``, ``act.<layer>`` for layer outputs and ``w.<layer>``
    for convolution kernels.
    """

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for name, p in self.items():
                fh.write(f"{name} {p.scale!r} {p.zero_point}\n")

    @classmethod
    def load(cls, path) -> "Calibration":
        cal = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) != 3:
                    raise DataError(f"{path}:{lineno}: expected 'name scale zero_point'")
                try:
                    cal[parts[0]] = QuantParams(float(parts[1]), int(parts[2]))
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from None
        return cal


def calibrate(model: Model, images, ranges=None) -> Calibration:
    """Min/max calibration over ``images`` (GrayImages or input tensors).

    Activation ranges are observed on the deployed (ReLU) variant of the float
    model, since that is what the integer network computes. Pass a dict as
    ``ranges`` to read or extend the raw running min/max per layer.
    """
    images = list(images)
    if not images:
        raise DataError("calibration needs at least one image")
    deployed = model if model.relu else model.deployed()
    net = model.net
    ranges = {} if ranges is None else ranges
    for item in images:
        outs = deployed.forward(_as_tensor(item, net), collect=True)
        for layer, out in zip(net.layers, outs):
            lo, hi = float(out.min()), float(out.max())
            old = ranges.get(layer.index)
            ranges[layer.index] = (lo, hi) if old is None else (min(old[0], lo), max(old[1], hi))
    cal = Calibration()
    cal["input"] = INPUT_PARAMS
    for layer in net.layers:
        cal[f"act.{layer.index}"] = affine_params(*ranges[layer.index])
    for idx in net.conv_indices:
        cal[f"w.{idx}"] = symmetric_params(fold_batchnorm(model.weights.layers[idx]).weights)
    return cal


def quantize_multiplier(m: float):
    """Express a positive real multiplier as ``m0 * 2**-shift`` with a 31-bit ``m0``."""
    if m <= 0:
        raise ValueError("multiplier must be positive")
    frac, exp = math.frexp(m)
    m0 = int(round_half_away(frac * (1 << 31)))
    shift = 31 - exp
    if m0 == 1 << 31:
        m0 //= 2
        shift -= 1
    if shift < 1:
        raise ValueError(f"multiplier {m} too large for fixed-point requantization")
    return m0, shift


def requantize(acc, m0: int, shift: int, zero_point: int) -> np.ndarray:
    """``round(acc * m0 / 2**shift) + zero_point`` in int64, saturated to int8."""
    acc = np.clip(np.asarray(acc, dtype=np.int64), INT32_MIN, INT32_MAX)
    if shift > 62:
        scaled = np.zeros_like(acc)
    else:
        prod = acc * np.int64(m0)
        mag = (np.abs(prod) + (np.int64(1) << np.int64(shift - 1))) >> np.int64(shift)
        scaled = np.sign(prod) * mag
    return np.clip(scaled + zero_point, QMIN, QMAX).astype(np.int8)


@dataclass(frozen=True, eq=False)
class QConv:
    weights: np.ndarray  # int8 (o, c*k*k) stored as float64 for exact BLAS products
    bias: np.ndarray  # int32 accumulator units
    m0: int
    shift: int
    w_params: QuantParams
    out_params: QuantParams
    in_params: QuantParams
    relu: bool


class QuantizedModel:
    """Integer execution of a network. Heads are returned dequantized."""

    kind = "int8"

    def __init__(self, float_model: Model, cal: Calibration):
        self.net = float_model.net
        self.float_model = float_model
        self.calibration = cal
        self.name = float_model.name
        self.act = {}
        self.qconv = {}
        if "input" not in cal:
            raise DataError("calibration lacks params for tensor 'input'")
        prev = cal["input"]
        for layer in self.net.layers:
            key = f"act.{layer.index}"
            if layer.kind in ("maxpool", "upsample", "yolo"):
                self.act[layer.index] = prev
            elif key not in cal:
                raise DataError(f"calibration lacks params for layer {layer.index} [{layer.kind}] ({key})")
            else:
                self.act[layer.index] = cal[key]
            if layer.kind == "convolutional":
                wkey = f"w.{layer.index}"
                if wkey not in cal:
                    raise DataError(f"calibration lacks weight params for layer {layer.index} ({wkey})")
                self.qconv[layer.index] = self._quantize_conv(layer, prev, cal[wkey], self.act[layer.index])
            prev = self.act[layer.index]

    def _quantize_conv(self, layer, in_p, w_p, out_p) -> QConv:
        folded = fold_batchnorm(self.float_model.weights.layers[layer.index])
        wq = w_p.quantize(folded.weights).reshape(layer.filters, -1)
        bias_scale = in_p.scale * w_p.scale
        bias = np.clip(round_half_away(folded.biases.astype(np.float64) / bias_scale), INT32_MIN, INT32_MAX)
        m0, shift = quantize_multiplier(bias_scale / out_p.scale)
        relu = layer.activation in ("leaky", "relu")
        return QConv(wq.astype(np.float64), bias.astype(np.int64), m0, shift, w_p, out_p, in_p, relu)

    def quantize_input(self, tensor) -> QuantTensor:
        p = self.calibration["input"]
        return QuantTensor(p.quantize(tensor), p)

    def forward_q(self, tensor) -> list:
        """Integer outputs of every layer as :class:`QuantTensor`."""
        expect = (self.net.channels, self.net.height, self.net.width)
        if tuple(tensor.shape) != expect:
            raise ShapeError(f"input tensor {tensor.shape} does not match network input {expect}")
        x = self.quantize_input(tensor)
        outputs = []
        for layer in self.net.layers:
            try:
                x = self._run(layer, x, outputs)
            except TubelocError as exc:
                raise type(exc)(f"layer {layer.index} [{layer.kind}]: {exc}") from None
            outputs.append(x)
        return outputs

    def forward(self, tensor, collect=False):
        outs = self.forward_q(tensor)
        if collect:
            return [o.dequantize() for o in outs]
        return [outs[l.index].dequantize() for l in self.net.yolo_layers]

    def _run(self, layer, x: QuantTensor, outputs) -> QuantTensor:
        kind = layer.kind
        out_p = self.act[layer.index]
        if kind == "convolutional":
            qc = self.qconv[layer.index]
            centered = x.values.astype(np.float64) - x.params.zero_point
            cols, oh, ow = im2col(centered, layer.size, layer.stride, layer.padding)
            acc = (qc.weights @ cols).astype(np.int64) + qc.bias[:, None]
            q = requantize(acc, qc.m0, qc.shift, out_p.zero_point)
            if qc.relu:
                q = np.maximum(q, np.int8(max(out_p.zero_point, QMIN)))
            return QuantTensor(q.reshape(layer.filters, oh, ow), out_p)
        if kind == "maxpool":
            pad = int(layer.get("padding", layer.size - 1))
            return QuantTensor(maxpool2d(x.values, layer.size, layer.stride, pad), x.params)
        if kind == "upsample":
            return QuantTensor(upsample2x(x.values, layer.stride), x.params)
        if kind == "route":
            parts = [self._rescale(outputs[i], out_p) for i in layer.sources]
            return QuantTensor(route_concat(parts), out_p)
        if kind == "shortcut":
            a, b = (outputs[i] for i in layer.sources)
            real = (a.params.scale * (a.values.astype(np.float64) - a.params.zero_point)
                    + b.params.scale * (b.values.astype(np.float64) - b.params.zero_point))
            if layer.get("activation", "linear") in ("leaky", "relu"):
                real = np.maximum(real, 0)
            return QuantTensor(out_p.quantize(real), out_p)
        if kind == "yolo":
            return x
        raise ShapeError(f"unsupported layer kind {kind}")

    @staticmethod
    def _rescale(t: QuantTensor, out_p: QuantParams) -> np.ndarray:
        if t.params == out_p:
            return t.values
        m0, shift = quantize_multiplier(t.params.scale / out_p.scale)
        return requantize(t.values.astype(np.int64) - t.params.zero_point, m0, shift, out_p.zero_point)


def quantize_network(model: Model, params: Calibration) -> QuantizedModel:
    return QuantizedModel(model, params)
