"""Darknet network definitions (``.cfg``) and weight containers (``.weights``).

Both formats are byte-compatible with the reference Darknet framework, so
published models load unmodified. Layers are indexed from 0, skipping the
``[net]`` header section, exactly as Darknet's ``route`` layers count them.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np

from .errors import ParseError, ShapeError

BN_EPS = 1e-6

LAYER_KINDS = ("convolutional", "maxpool", "upsample", "route", "shortcut", "yolo")

_REQUIRED = {
    "convolutional": ("filters", "size", "stride", "activation"),
    "maxpool": ("size", "stride"),
    "upsample": ("stride",),
    "route": ("layers",),
    "shortcut": ("from",),
    "yolo": ("anchors", "mask", "classes"),
}

_KNOWN = {
    "net": {"batch", "subdivisions", "width", "height", "channels", "momentum", "decay", "angle",
            "saturation", "exposure", "hue", "learning_rate", "burn_in", "max_batches", "policy",
            "steps", "scales", "mosaic", "flip"},
    "convolutional": {"batch_normalize", "filters", "size", "stride", "pad", "padding", "activation"},
    "maxpool": {"size", "stride", "padding"},
    "upsample": {"stride"},
    "route": {"layers"},
    "shortcut": {"from", "activation"},
    "yolo": {"mask", "anchors", "classes", "num", "jitter", "ignore_thresh", "truth_thresh",
             "random"},
}

ACTIVATIONS = ("linear", "leaky", "relu")


def _parse_value(text: str):
    parts = [p.strip() for p in text.split(",") if p.strip()]
    vals = []
    for p in parts:
        try:
            vals.append(int(p))
        except ValueError:
            try:
                vals.append(float(p))
            except ValueError:
                vals.append(p)
    if "," in text:
        return vals
    return vals[0] if vals else ""


@dataclass(frozen=True)
class LayerDef:
    index: int
    kind: str
    attrs: dict
    in_shape: tuple
    out_shape: tuple
    unknown_keys: tuple = ()

    def get(self, key, default=None):
        return self.attrs.get(key, default)

    # convolution / pooling helpers
    @property
    def filters(self) -> int:
        return int(self.attrs["filters"])

    @property
    def size(self) -> int:
        return int(self.attrs["size"])

    @property
    def stride(self) -> int:
        return int(self.attrs["stride"])

    @property
    def padding(self) -> int:
        """Zero padding on each side of a convolution."""
        if int(self.attrs.get("pad", 0)):
            return self.size // 2
        return int(self.attrs.get("padding", 0))

    @property
    def batch_normalize(self) -> bool:
        return bool(int(self.attrs.get("batch_normalize", 0)))

    @property
    def activation(self) -> str:
        return str(self.attrs.get("activation", "linear"))

    @property
    def sources(self) -> tuple:
        """Absolute indices of the layers a route or shortcut reads."""
        return self.attrs["_sources"]

    # yolo helpers
    @property
    def anchors(self) -> list:
        a = self.attrs["anchors"]
        return [(float(a[i]), float(a[i + 1])) for i in range(0, len(a), 2)]

    @property
    def mask(self) -> list:
        m = self.attrs["mask"]
        return [int(v) for v in (m if isinstance(m, list) else [m])]

    @property
    def classes(self) -> int:
        return int(self.attrs["classes"])

    def weight_shapes(self):
        """Per-block float counts in file order, or ``None`` for weightless layers."""
        if self.kind != "convolutional":
            return None
        n, c, k = self.filters, self.in_shape[0], self.size
        if self.batch_normalize:
            return [("biases", n), ("scales", n), ("rolling_mean", n), ("rolling_variance", n),
                    ("weights", n * c * k * k)]
        return [("biases", n), ("weights", n * c * k * k)]


@dataclass(frozen=True)
class NetworkDef:
    width: int
    height: int
    channels: int
    layers: tuple
    net_attrs: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.layers)

    @property
    def conv_indices(self) -> list:
        return [l.index for l in self.layers if l.kind == "convolutional"]

    @property
    def yolo_layers(self) -> list:
        return [l for l in self.layers if l.kind == "yolo"]

    def count(self, kind: str) -> int:
        return sum(1 for l in self.layers if l.kind == kind)

    def n_floats(self) -> int:
        return sum(n for l in self.layers for _, n in (l.weight_shapes() or ()))

    def default_cutoff(self) -> int:
        """Index of the first route layer: where the feature divider begins."""
        for l in self.layers:
            if l.kind == "route":
                return l.index
        return len(self.layers)


def _sections(text: str):
    sections = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ParseError(f"line {lineno}: malformed section header {line!r}")
            sections.append((line[1:-1].strip().lower(), {}, lineno))
        else:
            if not sections:
                raise ParseError(f"line {lineno}: key outside any section")
            if "=" not in line:
                raise ParseError(f"line {lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            sections[-1][1][key.strip()] = _parse_value(value.strip())
    return sections


def parse_cfg(text: str) -> NetworkDef:
    """Parse a Darknet cfg and annotate every layer with its output shape."""
    sections = _sections(text)
    if not sections or sections[0][0] not in ("net", "network"):
        raise ParseError("cfg must start with a [net] section")
    net_attrs = sections[0][1]
    for k in ("width", "height", "channels"):
        if k not in net_attrs:
            raise ParseError(f"[net] section is missing required key {k!r}")
    width, height, channels = int(net_attrs["width"]), int(net_attrs["height"]), int(net_attrs["channels"])
    unknown = sorted(set(net_attrs) - _KNOWN["net"])
    if unknown:
        warnings.warn(f"[net]: unrecognised keys {unknown}", stacklevel=2)

    layers = []
    shape = (channels, height, width)
    for idx, (kind, attrs, lineno) in enumerate(sections[1:]):
        if kind not in LAYER_KINDS:
            raise ParseError(f"unknown section kind [{kind}] at line {lineno} (layer {idx})")
        for key in _REQUIRED[kind]:
            if key not in attrs:
                raise ParseError(f"layer {idx} [{kind}] is missing required key {key!r}")
        unknown = tuple(sorted(set(attrs) - _KNOWN[kind]))
        if unknown:
            warnings.warn(f"layer {idx} [{kind}]: unrecognised keys {list(unknown)}", stacklevel=2)
        attrs = dict(attrs)
        c, h, w = shape
        if kind == "convolutional":
            act = attrs["activation"]
            if act not in ACTIVATIONS:
                raise ParseError(f"layer {idx}: unsupported activation {act!r}")
            tmp = LayerDef(idx, kind, attrs, shape, shape)
            k, s, p = tmp.size, tmp.stride, tmp.padding
            out = (tmp.filters, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
        elif kind == "maxpool":
            k, s = int(attrs["size"]), int(attrs["stride"])
            pad = int(attrs.get("padding", k - 1))
            out = (c, (h + pad - k) // s + 1, (w + pad - k) // s + 1)
        elif kind == "upsample":
            s = int(attrs["stride"])
            out = (c, h * s, w * s)
        elif kind == "route":
            refs = attrs["layers"]
            refs = refs if isinstance(refs, list) else [refs]
            srcs = []
            for r in refs:
                a = idx + r if r < 0 else r
                if not 0 <= a < idx:
                    raise ParseError(f"layer {idx} [route] refers to nonexistent layer {r}")
                srcs.append(a)
            shapes = [layers[a].out_shape for a in srcs]
            if len({s[1:] for s in shapes}) != 1:
                raise ParseError(f"layer {idx} [route] joins mismatched spatial dims {shapes}")
            attrs["_sources"] = tuple(srcs)
            out = (sum(s[0] for s in shapes),) + shapes[0][1:]
        elif kind == "shortcut":
            r = int(attrs["from"])
            a = idx + r if r < 0 else r
            if not 0 <= a < idx:
                raise ParseError(f"layer {idx} [shortcut] refers to nonexistent layer {r}")
            if layers[a].out_shape != shape:
                raise ParseError(f"layer {idx} [shortcut] adds {layers[a].out_shape} to {shape}")
            attrs["_sources"] = (idx - 1, a)
            out = shape
        else:  # yolo
            tmp = LayerDef(idx, kind, attrs, shape, shape)
            n_anchor = len(tmp.anchors)
            if any(m >= n_anchor or m < 0 for m in tmp.mask):
                raise ParseError(f"layer {idx} [yolo] mask {tmp.mask} exceeds {n_anchor} anchors")
            expect = len(tmp.mask) * (5 + tmp.classes)
            if c != expect:
                raise ParseError(f"layer {idx} [yolo] expects {expect} input channels, got {c}")
            out = shape
        if min(out) < 1:
            raise ParseError(f"layer {idx} [{kind}] produces empty output {out}")
        layers.append(LayerDef(idx, kind, attrs, shape, out, unknown))
        shape = out
    return NetworkDef(width, height, channels, tuple(layers), net_attrs)


def load_cfg(path) -> NetworkDef:
    with open(path, encoding="utf-8") as fh:
        return parse_cfg(fh.read())


def bundled_cfg(name: str = "yolov3-tiny") -> str:
    """Text of a cfg shipped with the package: ``yolov3-tiny`` or ``yolov3``."""
    return resources.files("tubeloc").joinpath("cfg").joinpath(f"{name}.cfg").read_text(encoding="utf-8")


def bundled_cfg_path(name: str = "yolov3-tiny") -> str:
    path = resources.files("tubeloc").joinpath("cfg").joinpath(f"{name}.cfg")
    if not path.is_file():
        raise FileNotFoundError(f"no bundled cfg named {name!r}")
    return str(path)


# ------------------------------------------------------------------ weights

@dataclass(frozen=True)
class WeightHeader:
    major: int = 0
    minor: int = 2
    revision: int = 0
    seen: int = 0

    @property
    def wide_seen(self) -> bool:
        return (self.major * 10 + self.minor) >= 2 and self.major < 1000 and self.minor < 1000

    @property
    def nbytes(self) -> int:
        return 12 + (8 if self.wide_seen else 4)

    def pack(self) -> bytes:
        fmt = "<iiiq" if self.wide_seen else "<iiiI"
        return struct.pack(fmt, self.major, self.minor, self.revision, self.seen)


@dataclass(frozen=True, eq=False)
class ConvWeights:
    """Parameters of one convolutional layer. BN fields are ``None`` when absent."""

    biases: np.ndarray
    weights: np.ndarray  # (out, in, k, k)
    scales: np.ndarray | None = None
    rolling_mean: np.ndarray | None = None
    rolling_variance: np.ndarray | None = None

    def __post_init__(self):
        for name in ("biases", "weights", "scales", "rolling_mean", "rolling_variance"):
            v = getattr(self, name)
            if v is not None:
                v = np.array(v, dtype=np.float32)
                v.setflags(write=False)
                object.__setattr__(self, name, v)

    @property
    def batch_normalize(self) -> bool:
        return self.scales is not None

    @property
    def shape(self) -> tuple:
        return (self.batch_normalize,) + self.weights.shape

    def blocks(self):
        if self.batch_normalize:
            return [("biases", self.biases), ("scales", self.scales), ("rolling_mean", self.rolling_mean),
                    ("rolling_variance", self.rolling_variance), ("weights", self.weights)]
        return [("biases", self.biases), ("weights", self.weights)]

    def equals(self, other) -> bool:
        """Bit-exact comparison of every block."""
        a, b = self.blocks(), other.blocks()
        return len(a) == len(b) and all(
            na == nb and x.shape == y.shape and x.tobytes() == y.tobytes() for (na, x), (nb, y) in zip(a, b))


@dataclass(frozen=True, eq=False)
class WeightStore:
    header: WeightHeader
    layers: dict  # layer index -> ConvWeights, in network order

    def __eq__(self, other):
        if not isinstance(other, WeightStore):
            return NotImplemented
        return (self.header == other.header and list(self.layers) == list(other.layers)
                and all(self.layers[i].equals(other.layers[i]) for i in self.layers))

    def __getitem__(self, index) -> ConvWeights:
        return self.layers[index]


def parse_weights(data: bytes, net: NetworkDef) -> WeightStore:
    if len(data) < 16:
        raise ParseError(f"weight file too short for a header ({len(data)} bytes)", offset=0)
    major, minor, revision = struct.unpack_from("<iii", data, 0)
    hdr = WeightHeader(major, minor, revision, 0)
    if hdr.wide_seen:
        if len(data) < 20:
            raise ParseError("weight header truncated", offset=len(data))
        (seen,) = struct.unpack_from("<q", data, 12)
    else:
        (seen,) = struct.unpack_from("<I", data, 12)
    hdr = replace(hdr, seen=seen)
    body = data[hdr.nbytes:]
    expected = net.n_floats()
    available = len(body) // 4
    if available < expected or len(body) % 4:
        raise ParseError(f"weight stream holds {len(body) / 4:g} floats, network needs {expected}",
                         offset=hdr.nbytes + 4 * min(available, expected))
    if available > expected:
        raise ParseError(f"{len(body) - 4 * expected} trailing bytes after {expected} floats; "
                         "cfg and weights do not match", offset=hdr.nbytes + 4 * expected)
    flat = np.frombuffer(body, dtype="<f4")
    pos = 0
    layers = {}
    for layer in net.layers:
        shapes = layer.weight_shapes()
        if shapes is None:
            continue
        blocks = {}
        for name, n in shapes:
            blocks[name] = flat[pos:pos + n]
            pos += n
        k = layer.size
        blocks["weights"] = blocks["weights"].reshape(layer.filters, layer.in_shape[0], k, k)
        layers[layer.index] = ConvWeights(**blocks)
    return WeightStore(hdr, layers)


def load_weights(path, net: NetworkDef) -> WeightStore:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return parse_weights(data, net)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from None


def serialize_weights(store: WeightStore) -> bytes:
    chunks = [store.header.pack()]
    for conv in store.layers.values():
        for _, arr in conv.blocks():
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def save_weights(store: WeightStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_weights(store))


def init_weights(net: NetworkDef, seed=0, head_gain=1.0) -> WeightStore:
    """Random He-initialised weights for ``net``.

    Stands in for trained weights in tests and benchmarks. BN statistics are
    drawn near identity so activations stay O(1) through deep networks.
    """
    rng = np.random.default_rng(seed)
    layers = {}
    for layer in net.layers:
        if layer.kind != "convolutional":
            continue
        n, c, k = layer.filters, layer.in_shape[0], layer.size
        std = np.sqrt(2.0 / (c * k * k))
        w = rng.normal(0.0, std, size=(n, c, k, k))
        if layer.batch_normalize:
            layers[layer.index] = ConvWeights(
                biases=rng.normal(0.0, 0.1, n), weights=w,
                scales=rng.uniform(0.8, 1.2, n), rolling_mean=rng.normal(0.0, 0.1, n),
                rolling_variance=rng.uniform(0.5, 1.5, n))
        else:
            layers[layer.index] = ConvWeights(biases=rng.normal(0.0, 0.5, n), weights=w * head_gain)
    return WeightStore(WeightHeader(0, 2, 0, 0), layers)


# -------------------------------------------------------------- transplant

@dataclass(frozen=True)
class TransplantPlan:
    cutoff: int
    source_id: str = "source"
    dest_id: str = "dest"


def transplant_backbone(source: WeightStore, dest: WeightStore, plan) -> WeightStore:
    """Copy ``source`` layers with index below the cutoff into ``dest``.

    ``plan`` is a :class:`TransplantPlan` or a bare cutoff index. Layers at or
    above the cutoff, and ``dest``'s header, are kept as they are.
    """
    cutoff = plan.cutoff if isinstance(plan, TransplantPlan) else int(plan)
    if cutoff < 0:
        raise ValueError(f"cutoff must be non-negative, got {cutoff}")
    layers = dict(dest.layers)
    for idx, conv in dest.layers.items():
        if idx >= cutoff:
            continue
        src = source.layers.get(idx)
        if src is None:
            raise ShapeError(f"layer {idx}: source model has no convolutional layer at this index")
        if src.shape != conv.shape:
            raise ShapeError(f"layer {idx}: source shape {src.shape} differs from destination {conv.shape}")
        layers[idx] = src
    extra = [i for i in source.layers if i < cutoff and i not in dest.layers]
    if extra:
        raise ShapeError(f"layer {extra[0]}: destination model has no convolutional layer at this index")
    return WeightStore(dest.header, layers)


def fold_batchnorm(conv: ConvWeights, eps: float = BN_EPS) -> ConvWeights:
    """Merge batch-norm statistics into kernel and bias.

    Returns the layer unchanged when it has no batch norm.
    """
    if not conv.batch_normalize:
        return conv
    k = conv.scales.astype(np.float64) / np.sqrt(conv.rolling_variance.astype(np.float64) + eps)
    weights = conv.weights.astype(np.float64) * k[:, None, None, None]
    biases = conv.biases.astype(np.float64) - k * conv.rolling_mean.astype(np.float64)
    return ConvWeights(biases=biases, weights=weights)
