"""Grayscale rasters, PGM/PFM I/O and the letterbox transform.

Pixel data lives in 2-D numpy arrays indexed ``[row, col]``. Containers
are frozen dataclasses whose arrays are marked read-only.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import EmptyDetectionError, ParseError, StageError, UnsupportedFormatError

INVALID_DISPARITY = -1.0
NETWORK_SIZE = 416


def _frozen(arr, dtype):
    arr = np.array(arr, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Single-channel 8-bit image.

    ``origin`` is the (x, y) position of the top-left pixel in the frame the
    image was cropped from; it is (0, 0) for camera frames.
    """

    pixels: np.ndarray
    origin: tuple[int, int] = (0, 0)

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"GrayImage needs a non-empty 2-D array, got shape {px.shape}")
        if px.dtype != np.uint8:
            if np.any((px < 0) | (px > 255)):
                raise ValueError("pixel values must lie in [0, 255]")
        object.__setattr__(self, "pixels", _frozen(px, np.uint8))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.all(self.pixels == other.pixels))

    def __repr__(self):
        return f"GrayImage({self.width}x{self.height}, origin={self.origin})"


@dataclass(frozen=True, eq=False)
class DisparityImage:
    """Disparity map in pixels. Invalid pixels hold ``INVALID_DISPARITY``."""

    values: np.ndarray
    n_nonfinite: int = 0

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float32)
        if v.ndim != 2:
            raise ValueError("disparity must be 2-D")
        bad = ~np.isfinite(v)
        n_bad = int(bad.sum())
        v[bad | (v <= 0)] = INVALID_DISPARITY
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "n_nonfinite", self.n_nonfinite + n_bad)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return self.values > 0


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return max(self.w, 0.0) * max(self.h, 0.0)

    @classmethod
    def from_center(cls, cx, cy, w, h):
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)

    def as_list(self):
        return [float(self.x), float(self.y), float(self.w), float(self.h)]


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class LetterboxTransform:
    scale: float
    pad_x: int
    pad_y: int
    source_w: int
    source_h: int
    content_w: int
    content_h: int
    target_w: int = NETWORK_SIZE
    target_h: int = NETWORK_SIZE

    def to_network(self, x, y):
        return (x * self.content_w / self.source_w + self.pad_x,
                y * self.content_h / self.source_h + self.pad_y)

    def to_source(self, x, y):
        return ((x - self.pad_x) * self.source_w / self.content_w,
                (y - self.pad_y) * self.source_h / self.content_h)


# --------------------------------------------------------------------- PGM

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*")


def _read_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments.

    Returns the tokens and the offset of the single whitespace byte that
    terminates the last one.
    """
    pos = 0
    tokens = []
    for _ in range(count):
        m = _TOKEN.match(data, pos)
        pos = m.end()
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if pos == start:
            raise ParseError("truncated header", offset=start)
        tokens.append((data[start:pos], start))
    if pos >= len(data):
        raise ParseError("header not terminated by whitespace", offset=pos)
    return tokens, pos + 1


def parse_pgm(data: bytes) -> GrayImage:
    magic = data[:2]
    if magic != b"P5":
        name = magic.decode("latin-1", "replace")
        if re.fullmatch(r"P[1-7]|Pf|PF", name):
            raise UnsupportedFormatError(f"unsupported format {name!r}; only binary P5 graymaps are read")
        raise ParseError(f"bad magic {magic!r}", offset=0)
    tokens, body = _read_tokens(data[2:], 3)
    body += 2
    try:
        w, h, maxval = (int(t) for t, _ in tokens)
    except ValueError:
        bad = next(t for t in tokens if not t[0].isdigit())
        raise ParseError(f"non-integer header field {bad[0]!r}", offset=bad[1] + 2) from None
    if w < 1 or h < 1:
        raise ParseError(f"invalid dimensions {w}x{h}", offset=2)
    if maxval > 255:
        raise UnsupportedFormatError(f"maxval {maxval} > 255 (16-bit PGM) is not supported")
    if maxval < 1:
        raise ParseError(f"invalid maxval {maxval}", offset=tokens[2][1] + 2)
    payload = data[body:body + w * h]
    if len(payload) != w * h:
        raise ParseError(f"expected {w * h} pixel bytes, found {len(payload)}", offset=body)
    return GrayImage(np.frombuffer(payload, dtype=np.uint8).reshape(h, w))


def load_pgm(path) -> GrayImage:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return parse_pgm(data)
    except (ParseError, UnsupportedFormatError) as exc:
        raise type(exc)(f"{path}: {exc}") from None


def save_pgm(image: GrayImage, path) -> None:
    header = f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(np.ascontiguousarray(image.pixels).tobytes())
    except OSError as exc:
        raise OSError(f"cannot write PGM to {path}: {exc.strerror}") from exc


def read_pgm_size(path) -> tuple[int, int]:
    """Width and height from a P5 header without reading the payload."""
    with open(path, "rb") as fh:
        head = fh.read(512)
    if head[:2] != b"P5":
        raise UnsupportedFormatError(f"{path}: not a P5 graymap")
    tokens, _ = _read_tokens(head[2:], 2)
    return int(tokens[0][0]), int(tokens[1][0])


# --------------------------------------------------------------------- PFM

def parse_pfm(data: bytes) -> DisparityImage:
    magic = data[:2]
    if magic == b"PF":
        raise UnsupportedFormatError("color PFM ('PF') is not supported; expected grayscale 'Pf'")
    if magic != b"Pf":
        raise ParseError(f"bad magic {magic!r}", offset=0)
    tokens, body = _read_tokens(data[2:], 3)
    body += 2
    try:
        w, h = int(tokens[0][0]), int(tokens[1][0])
        scale = float(tokens[2][0])
    except ValueError:
        raise ParseError("malformed PFM header", offset=2) from None
    if scale == 0:
        raise ParseError("PFM scale must be non-zero", offset=tokens[2][1] + 2)
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    n = w * h
    raw = data[body:body + 4 * n]
    if len(raw) != 4 * n:
        raise ParseError(f"expected {n} floats, found {len(raw) // 4}", offset=body)
    values = np.frombuffer(raw, dtype=dtype).reshape(h, w)[::-1].astype(np.float32)
    return DisparityImage(values)


def load_pfm(path) -> DisparityImage:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return parse_pfm(data)
    except (ParseError, UnsupportedFormatError) as exc:
        raise type(exc)(f"{path}: {exc}") from None


def save_pfm(disparity, path, little_endian=True) -> None:
    values = disparity.values if isinstance(disparity, DisparityImage) else np.asarray(disparity)
    h, w = values.shape
    dtype = "<f4" if little_endian else ">f4"
    scale = -1.0 if little_endian else 1.0
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n{scale}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(values[::-1], dtype=dtype).tobytes())


# -------------------------------------------------------------- letterbox

def resize_bilinear(pixels: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize with pixel-center alignment and edge clamping."""
    src = pixels.astype(np.float64)
    h, w = src.shape
    sy = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    sx = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[:, None]
    fx = (sx - x0)[None, :]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    return np.floor(out + 0.5).clip(0, 255).astype(np.uint8)


def letterbox(image: GrayImage, target: int = NETWORK_SIZE):
    """Scale ``image`` into a ``target`` square, zero-padding the short axis."""
    sw, sh = image.width, image.height
    scale = min(target / sw, target / sh)
    cw = min(target, max(1, int(round(sw * scale))))
    ch = min(target, max(1, int(round(sh * scale))))
    pad_x = (target - cw) // 2
    pad_y = (target - ch) // 2
    out = np.zeros((target, target), dtype=np.uint8)
    if (cw, ch) == (sw, sh):
        content = image.pixels
    else:
        content = resize_bilinear(image.pixels, cw, ch)
    out[pad_y:pad_y + ch, pad_x:pad_x + cw] = content
    tf = LetterboxTransform(scale=scale, pad_x=pad_x, pad_y=pad_y, source_w=sw, source_h=sh,
                            content_w=cw, content_h=ch, target_w=target, target_h=target)
    return GrayImage(out), tf


def letterbox_box(box: BoundingBox, tf: LetterboxTransform) -> BoundingBox:
    """Forward map of a source-image box into network coordinates."""
    x1, y1 = tf.to_network(box.x, box.y)
    x2, y2 = tf.to_network(box.x2, box.y2)
    return BoundingBox(x1, y1, x2 - x1, y2 - y1)


def unletterbox_box(box: BoundingBox, tf: LetterboxTransform) -> BoundingBox:
    """Map a network-coordinate box back to the source image, clamped."""
    x1 = max(box.x, tf.pad_x)
    y1 = max(box.y, tf.pad_y)
    x2 = min(box.x2, tf.pad_x + tf.content_w)
    y2 = min(box.y2, tf.pad_y + tf.content_h)
    if x2 <= x1 or y2 <= y1:
        raise EmptyDetectionError("box lies entirely inside the letterbox padding")
    sx1, sy1 = tf.to_source(x1, y1)
    sx2, sy2 = tf.to_source(x2, y2)
    sx1, sy1 = max(sx1, 0.0), max(sy1, 0.0)
    sx2, sy2 = min(sx2, float(tf.source_w)), min(sy2, float(tf.source_h))
    return BoundingBox(sx1, sy1, sx2 - sx1, sy2 - sy1)


def crop(image: GrayImage, box: BoundingBox) -> GrayImage:
    """Pixels of ``image`` covered by ``box``, clipped to the image.

    The box edges are rounded outward to whole pixels. The result's
    ``origin`` is expressed in the frame of ``image``'s own origin.
    """
    x1 = max(int(np.floor(box.x)), 0)
    y1 = max(int(np.floor(box.y)), 0)
    x2 = min(int(np.ceil(box.x2)), image.width)
    y2 = min(int(np.ceil(box.y2)), image.height)
    if x2 <= x1 or y2 <= y1:
        raise StageError(f"box {box.as_list()} does not intersect the {image.width}x{image.height} image",
                         stage="crop")
    ox, oy = image.origin
    return GrayImage(image.pixels[y1:y2, x1:x2], origin=(ox + x1, oy + y1))

