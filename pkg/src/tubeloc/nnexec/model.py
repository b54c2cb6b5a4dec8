"""Float32 execution of a parsed Darknet network."""
from __future__ import annotations

import numpy as np

from ..darknet import BN_EPS, NetworkDef, WeightStore, fold_batchnorm, load_cfg, load_weights
from ..errors import ShapeError, TubelocError
from .ops import activate, conv2d, maxpool2d, route_concat, upsample2x


class Model:
    """A network definition bound to its weights.

    With ``fold=True`` batch norm is merged into the kernels once at load time.
    ``relu`` replaces every leaky activation with a plain ReLU, which is the
    transformation applied before 8-bit deployment.
    """

    kind = "float"

    def __init__(self, net: NetworkDef, weights: WeightStore, fold=True, relu=False, name="model"):
        missing = [i for i in net.conv_indices if i not in weights.layers]
        if missing:
            raise ShapeError(f"weights lack convolutional layer {missing[0]}")
        self.net = net
        self.weights = weights
        self.fold = fold
        self.relu = relu
        self.name = name
        self.params = {}
        for idx in net.conv_indices:
            w = weights.layers[idx]
            layer = net.layers[idx]
            if w.weights.shape != (layer.filters, layer.in_shape[0], layer.size, layer.size):
                raise ShapeError(f"layer {idx}: weight shape {w.weights.shape} does not match cfg")
            self.params[idx] = fold_batchnorm(w) if fold else w

    @classmethod
    def load(cls, cfg_path, weights_path, **kw):
        net = load_cfg(cfg_path)
        return cls(net, load_weights(weights_path, net), **kw)

    def activation(self, layer) -> str:
        act = layer.activation
        if self.relu and act == "leaky":
            return "relu"
        return act

    def deployed(self) -> "Model":
        """Same weights with leaky activations swapped for ReLU."""
        return Model(self.net, self.weights, fold=self.fold, relu=True, name=self.name)

    def forward(self, tensor, collect=False, stop=None):
        """Run the network. Returns the yolo head inputs, or every layer output.

        ``stop`` ends the pass before that layer index and implies ``collect``.
        """
        net = self.net
        expect = (net.channels, net.height, net.width)
        if tensor.shape != expect:
            raise ShapeError(f"input tensor {tensor.shape} does not match network input {expect}")
        outputs = []
        x = tensor.astype(np.float32, copy=False)
        for layer in net.layers[:stop]:
            try:
                x = self._run(layer, x, outputs)
            except TubelocError as exc:
                raise type(exc)(f"layer {layer.index} [{layer.kind}]: {exc}") from None
            outputs.append(x)
        if collect or stop is not None:
            return outputs
        return [outputs[l.index] for l in net.yolo_layers]

    def _run(self, layer, x, outputs):
        kind = layer.kind
        if kind == "convolutional":
            p = self.params[layer.index]
            act = self.activation(layer)
            if not p.batch_normalize:
                return conv2d(x, p.weights, p.biases, layer.stride, layer.padding, act)
            y = conv2d(x, p.weights, None, layer.stride, layer.padding)
            y = (y - p.rolling_mean[:, None, None]) / np.sqrt(p.rolling_variance[:, None, None] + np.float32(BN_EPS))
            y = y * p.scales[:, None, None] + p.biases[:, None, None]
            return activate(y.astype(np.float32), act)
        if kind == "maxpool":
            return maxpool2d(x, layer.size, layer.stride, int(layer.get("padding", layer.size - 1)))
        if kind == "upsample":
            return upsample2x(x, layer.stride)
        if kind == "route":
            return route_concat([outputs[i] for i in layer.sources])
        if kind == "shortcut":
            return activate(outputs[layer.sources[0]] + outputs[layer.sources[1]], layer.get("activation", "linear"))
        if kind == "yolo":
            return x
        raise ShapeError(f"unsupported layer kind {kind}")


def forward(model, tensor):
    """Head tensors of ``model`` (float or quantized) for one input tensor."""
    return model.forward(tensor)
