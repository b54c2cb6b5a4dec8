"""Offline stand-in for the published single-class detector.

The published weights cannot be fetched here, so parity checks run on a
small detector trained on rendered scenes: the seeded random YOLOv3-tiny
backbone (layers below 13) stays frozen and the six convolutions after it
were fitted with ``demos/train_surrogate.py``. All activations are ReLU, so
the float model is exactly the reference the int8 path approximates.
"""
from __future__ import annotations

from functools import lru_cache
from pathlib import Path

import numpy as np

from tubeloc.darknet import BN_EPS, ConvWeights, WeightStore, bundled_cfg, init_weights, parse_cfg
from tubeloc.nnexec import Model
from tubeloc.synth import render_scene

HEADS = Path(__file__).with_name("fixtures") / "surrogate_heads.npz"
BACKBONE_SEED = 0
PARITY_CONF = 0.75
IMAGE_SEED = 30_000


def surrogate_cfg() -> str:
    return bundled_cfg("yolov3-tiny").replace("activation=leaky", "activation=relu")


def surrogate_weights(path=HEADS) -> WeightStore:
    net = parse_cfg(surrogate_cfg())
    store = init_weights(net, seed=BACKBONE_SEED)
    layers = dict(store.layers)
    with np.load(path) as fx:
        for key in fx.files:
            if not key.startswith("w"):
                continue
            idx = int(key[1:])
            w = fx[key].astype(np.float64)
            b = fx[f"b{idx}"].astype(np.float64)
            if layers[idx].batch_normalize:
                # identity statistics; the kernel absorbs the 1/sqrt(1 + eps) the fold will apply
                n = len(b)
                layers[idx] = ConvWeights(biases=b, weights=w * np.sqrt(1 + BN_EPS), scales=np.ones(n),
                                          rolling_mean=np.zeros(n), rolling_variance=np.ones(n))
            else:
                layers[idx] = ConvWeights(biases=b, weights=w)
    return WeightStore(store.header, layers)


@lru_cache(maxsize=1)
def surrogate_detector() -> Model:
    net = parse_cfg(surrogate_cfg())
    return Model(net, surrogate_weights(), name="surrogate-tiny")


def parity_images(n, seed=IMAGE_SEED):
    """``n`` rendered 1024x768 frames; every sixth has no tube."""
    return [render_scene(seed=seed + k, tube=k % 6 != 5).image for k in range(n)]
