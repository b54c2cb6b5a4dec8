"""Image-plane pose of a sample tube inside a detection crop.

Left half of the pipeline turns the crop into a binary edge mask:
Gaussian blur, Sobel magnitude, histogram equalization, adaptive mean
threshold. Right half picks the tube's contour, fits the tube axis by total
least squares over the enclosed pixels, anchors that axis at the detection
centroid and intersects it with the contour to get the two end points.

Coordinates are (x, y) with y pointing down. Orientation is the angle of the
tube axis from the +x axis toward +y, folded into [0, 180).
"""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateFitError, IntersectionError, NoContourError, StageError, TubelocError
from .imgcore import GrayImage, save_pgm

BLUR_SIZE = 5
BLUR_SIGMA = 1.0
BLOCK = 15
OFFSET = 5
LOW_ANISOTROPY = 0.8

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.int32)
SOBEL_Y = SOBEL_X.T.copy()


class SmallCropWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray  # bool (h, w)
    origin: tuple = (0, 0)

    @property
    def width(self):
        return self.bits.shape[1]

    @property
    def height(self):
        return self.bits.shape[0]

    def to_image(self) -> GrayImage:
        return GrayImage(self.bits.astype(np.uint8) * 255, origin=self.origin)


# ---------------------------------------------------------------- filters

def gaussian_kernel(size=BLUR_SIZE, sigma=BLUR_SIGMA) -> np.ndarray:
    r = np.arange(size) - size // 2
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def gaussian_blur(image: GrayImage, size=BLUR_SIZE, sigma=BLUR_SIGMA) -> GrayImage:
    """Separable Gaussian blur with edge-replicated borders."""
    if image.width < size or image.height < size:
        warnings.warn(f"crop {image.width}x{image.height} smaller than {size}x{size} blur kernel; "
                      "returned unchanged", SmallCropWarning, stacklevel=2)
        return image
    g = gaussian_kernel(size, sigma)
    r = size // 2
    src = np.pad(image.pixels.astype(np.float64), r, mode="edge")
    h, w = image.height, image.width
    rows = sum(g[k] * src[:, k:k + w] for k in range(size))
    out = sum(g[k] * rows[k:k + h, :] for k in range(size))
    return GrayImage(np.floor(out + 0.5).clip(0, 255).astype(np.uint8), origin=image.origin)


def _correlate3(padded, kernel, h, w):
    acc = np.zeros((h, w), dtype=np.int32)
    for dy in range(3):
        for dx in range(3):
            if kernel[dy, dx]:
                acc += kernel[dy, dx] * padded[dy:dy + h, dx:dx + w]
    return acc


def sobel_magnitude(image: GrayImage) -> GrayImage:
    """``|Gx| + |Gy|`` with 3x3 Sobel kernels, edge-replicated, clamped to 255."""
    if image.width < 3 or image.height < 3:
        raise StageError(f"Sobel needs at least 3x3 pixels, got {image.width}x{image.height}", stage="sobel")
    h, w = image.height, image.width
    src = np.pad(image.pixels.astype(np.int32), 1, mode="edge")
    gx = _correlate3(src, SOBEL_X, h, w)
    gy = _correlate3(src, SOBEL_Y, h, w)
    mag = np.abs(gx) + np.abs(gy)
    return GrayImage(np.minimum(mag, 255).astype(np.uint8), origin=image.origin)


def equalize_hist(image: GrayImage) -> GrayImage:
    """CDF remap ``round(255 (cdf(v) - cdf_min) / (N - cdf_min))``.

    A constant image has ``N == cdf_min`` and maps to all zeros.
    """
    px = image.pixels
    n = px.size
    cdf = np.cumsum(np.bincount(px.ravel(), minlength=256))
    cdf_min = int(cdf[px.min()])
    if n == cdf_min:
        return GrayImage(np.zeros_like(px), origin=image.origin)
    lut = np.floor(255.0 * (cdf - cdf_min) / (n - cdf_min) + 0.5).clip(0, 255).astype(np.uint8)
    return GrayImage(lut[px], origin=image.origin)


def box_sum(values: np.ndarray, block: int) -> np.ndarray:
    """Sum over a ``block`` x ``block`` window centred on each pixel, edge-replicated."""
    r = block // 2
    padded = np.pad(values.astype(np.int64), r, mode="edge")
    ii = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1), dtype=np.int64)
    ii[1:, 1:] = padded.cumsum(0).cumsum(1)
    h, w = values.shape
    return ii[block:block + h, block:block + w] - ii[:h, block:block + w] - ii[block:block + h, :w] + ii[:h, :w]


def adaptive_mean_threshold(image: GrayImage, block=BLOCK, offset=OFFSET) -> BinaryMask:
    """Foreground where a pixel exceeds its local window mean by more than ``offset``.

    Compared in integers as ``v * block**2 > window_sum + offset * block**2``.
    """
    if block % 2 == 0 or block < 3:
        raise ValueError(f"block size must be odd and >= 3, got {block}")
    px = image.pixels.astype(np.int64)
    area = block * block
    bits = px * area > box_sum(px, block) + offset * area
    return BinaryMask(bits, origin=image.origin)


def binarize_stages(crop: GrayImage, block=BLOCK, offset=OFFSET) -> dict:
    blurred = gaussian_blur(crop)
    edges = sobel_magnitude(blurred)
    equalized = equalize_hist(edges)
    mask = adaptive_mean_threshold(equalized, block, offset)
    return {"blur": blurred, "sobel": edges, "equalized": equalized, "mask": mask}


def binarize_tube_region(crop: GrayImage, block=BLOCK, offset=OFFSET) -> BinaryMask:
    return binarize_stages(crop, block, offset)["mask"]


# --------------------------------------------------------------- contours

# clockwise on screen (y down), starting west
_DIRS = ((-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1))
_DIR_INDEX = {d: i for i, d in enumerate(_DIRS)}


def _trace_outer(fg: np.ndarray, x0: int, y0: int) -> list:
    """Moore-neighbour trace of the outer border starting at the raster-first pixel.

    ``fg`` must carry a one-pixel background frame. Stops when the walk is
    about to repeat its first move.
    """
    def is_fg(x, y):
        return fg[y, x]

    # west of the raster-first pixel is background
    start_b = 0
    first = None
    for k in range(1, 9):
        d = (start_b + k) % 8
        dx, dy = _DIRS[d]
        if is_fg(x0 + dx, y0 + dy):
            first = (x0 + dx, y0 + dy, d)
            break
    if first is None:
        return [(x0, y0)]
    points = [(x0, y0)]
    px, py = x0, y0
    b = start_b
    p1 = (first[0], first[1])
    while True:
        for k in range(1, 9):
            d = (b + k) % 8
            dx, dy = _DIRS[d]
            nx, ny = px + dx, py + dy
            if is_fg(nx, ny):
                break
        # background neighbour examined just before the hit, relative to the new pixel
        bx, by = _DIRS[(d - 1) % 8]
        b = _DIR_INDEX[(px + bx - nx, py + by - ny)]
        if (px, py) == (x0, y0) and (nx, ny) == p1 and len(points) > 1:
            break
        px, py = nx, ny
        points.append((px, py))
    points.pop()  # the start pixel, reached again
    return points


def fill_polygon(points: np.ndarray) -> np.ndarray:
    """Integer pixel centres enclosed by (nonzero winding) or lying on a closed polygon.

    Vertices are integer pixel centres joined by 8-neighbour steps, so no
    non-vertex pixel centre ever lies on an edge.
    """
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    grid = np.zeros((y1 - y0 + 1, x1 - x0 + 1), dtype=bool)
    grid[pts[:, 1] - y0, pts[:, 0] - x0] = True
    nxt = np.roll(pts, -1, axis=0)
    # only edges with a vertical step cross scanlines; each crosses at its upper vertex
    step = pts[:, 1] != nxt[:, 1]
    a, b = pts[step], nxt[step]
    if len(a):
        row = np.minimum(a[:, 1], b[:, 1])
        xc = np.where(a[:, 1] < b[:, 1], a[:, 0], b[:, 0])
        sign = np.where(b[:, 1] > a[:, 1], 1, -1)
        order = np.lexsort((xc, row))
        row, xc, sign = row[order], xc[order], sign[order]
        starts = np.r_[0, np.nonzero(np.diff(row))[0] + 1]
        ends = np.r_[starts[1:], len(row)]
        for s, e in zip(starts, ends):
            y = row[s] - y0
            xs, sg = xc[s:e], sign[s:e]
            # winding of points between crossing i-1 and i is the sum of signs from i on
            wind = np.cumsum(sg[::-1])[::-1]
            for i in np.nonzero(wind[1:] != 0)[0] + 1:
                grid[y, xs[i - 1] - x0 + 1:xs[i] - x0] = True
    yy, xx = np.nonzero(grid)
    return np.stack([xx + x0, yy + y0], axis=1).astype(np.int64)


@dataclass(frozen=True, eq=False)
class Contour:
    points: np.ndarray  # (n, 2) int (x, y), in mask coordinates
    filled: np.ndarray  # (m, 2) int (x, y) pixels enclosed by the contour
    moments: dict = field(default_factory=dict)
    origin: tuple = (0, 0)

    @classmethod
    def from_points(cls, points, origin=(0, 0)):
        pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
        filled = fill_polygon(pts)
        return cls(pts, filled, _moments(filled), origin)

    def __len__(self):
        return len(self.points)

    @property
    def area(self) -> float:
        return self.moments["m00"]

    @property
    def centroid(self) -> tuple:
        m = self.moments
        return (m["m10"] / m["m00"], m["m01"] / m["m00"])

    def segments(self):
        a = self.points.astype(np.float64)
        return a, np.roll(a, -1, axis=0)

    def encloses(self, x: float, y: float) -> bool:
        """Nonzero-winding test; points on the polygon count as enclosed."""
        a, b = self.segments()
        if len(a) < 3:
            return False
        if _distance_to_segments(np.array([x, y]), a, b) < 1e-9:
            return True
        wn = 0
        for (x0, y0), (x1, y1) in zip(a, b):
            cross = (x1 - x0) * (y - y0) - (x - x0) * (y1 - y0)
            if y0 <= y < y1 and cross > 0:
                wn += 1
            elif y1 <= y < y0 and cross < 0:
                wn -= 1
        return wn != 0


def _moments(filled: np.ndarray) -> dict:
    x = filled[:, 0].astype(np.float64)
    y = filled[:, 1].astype(np.float64)
    m00 = float(len(filled))
    if m00 == 0:
        return {"m00": 0.0, "m10": 0.0, "m01": 0.0, "mu20": 0.0, "mu02": 0.0, "mu11": 0.0}
    cx, cy = x.mean(), y.mean()
    return {"m00": m00, "m10": float(x.sum()), "m01": float(y.sum()),
            "mu20": float(((x - cx) ** 2).sum()), "mu02": float(((y - cy) ** 2).sum()),
            "mu11": float(((x - cx) * (y - cy)).sum())}


def _label8(bits: np.ndarray):
    from scipy import ndimage

    return ndimage.label(bits, structure=np.ones((3, 3), dtype=int))


def find_contours(mask: BinaryMask) -> list:
    """Outer borders of the 8-connected foreground components, in raster order of their first pixel."""
    labels, n = _label8(mask.bits)
    if n == 0:
        return []
    padded = np.pad(labels, 1)
    h, w = labels.shape
    flat = labels.ravel()
    first_idx = np.full(n + 1, -1, dtype=np.int64)
    nz = np.nonzero(flat)[0]
    # np.unique returns the first occurrence of each label in raster order
    labs, pos = np.unique(flat[nz], return_index=True)
    first_idx[labs] = nz[pos]
    contours = []
    for lab in sorted(range(1, n + 1), key=lambda k: first_idx[k]):
        y0, x0 = divmod(int(first_idx[lab]), w)
        pts = _trace_outer(padded == lab, x0 + 1, y0 + 1)
        pts = np.array(pts, dtype=np.int64) - 1
        contours.append(Contour.from_points(pts, mask.origin))
    return [c for c in contours if c.area > 0]


def select_tube_contour(contours, centroid):
    """Pick the tube contour for a detection centroid given in mask coordinates.

    Candidates are contours enclosing the centroid; among them the one whose
    moment centroid is nearest wins (smaller area breaks ties). Returns
    ``(contour, degraded)``; ``degraded`` is set when no contour encloses the
    centroid and the globally nearest one was used instead.
    """
    usable = [c for c in contours if len(c) >= 3]
    if not usable:
        raise NoContourError("no usable contour in mask")
    cx, cy = centroid

    def key(c):
        mx, my = c.centroid
        return (np.hypot(mx - cx, my - cy), c.area)

    enclosing = [c for c in usable if c.encloses(cx, cy)]
    if enclosing:
        return min(enclosing, key=key), False
    return min(usable, key=key), True


# ------------------------------------------------------------- line fit

@dataclass(frozen=True)
class LineFit:
    direction: tuple  # unit (dx, dy), dx >= 0
    point: tuple
    eigen_ratio: float = 0.0

    @property
    def low_anisotropy(self) -> bool:
        return self.eigen_ratio > LOW_ANISOTROPY

    @property
    def angle_deg(self) -> float:
        return fold_angle(np.degrees(np.arctan2(self.direction[1], self.direction[0])))


def fold_angle(deg: float) -> float:
    a = float(deg) % 180.0
    return 0.0 if a >= 180.0 - 1e-12 else a


def canonical_direction(dx, dy):
    n = np.hypot(dx, dy)
    dx, dy = dx / n, dy / n
    if dx < 0 or (dx == 0 and dy < 0):
        dx, dy = -dx, -dy
    return (float(dx) + 0.0, float(dy) + 0.0)


def fit_line_least_squares(points, anchor=None) -> LineFit:
    """Principal axis of ``points`` (total least squares), anchored at ``anchor``.

    The anchor defaults to the point mean.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2 or np.all(pts == pts[0]):
        raise DegenerateFitError("need at least two distinct points for a line fit")
    mean = pts.mean(axis=0)
    cov = np.cov((pts - mean).T, bias=True)
    evals, evecs = np.linalg.eigh(cov)
    d = evecs[:, 1]
    ratio = float(evals[0] / evals[1]) if evals[1] > 0 else 1.0
    if anchor is None:
        anchor = mean
    fit = LineFit(canonical_direction(d[0], d[1]), (float(anchor[0]), float(anchor[1])), ratio)
    if fit.low_anisotropy:
        warnings.warn(f"point cloud is nearly isotropic (eigenvalue ratio {ratio:.2f}); "
                      "orientation is unreliable", stacklevel=2)
    return fit


# -------------------------------------------------------------- endpoints

@dataclass(frozen=True)
class TubePoseImage:
    endpoints: tuple  # ((x, y), (x, y)) full-image pixels
    centroid: tuple
    orientation_deg: float
    degraded: bool = False

    def to_json(self, image=None) -> dict:
        return {"image": image,
                "endpoints_px": [[float(v) for v in p] for p in self.endpoints],
                "centroid_px": [float(v) for v in self.centroid],
                "orientation_deg": float(self.orientation_deg),
                "degraded": bool(self.degraded)}


def _distance_to_segments(p, a, b):
    ab = b - a
    L = (ab ** 2).sum(axis=1)
    t = np.where(L > 0, ((p - a) * ab).sum(axis=1) / np.where(L > 0, L, 1), 0.0).clip(0, 1)
    proj = a + t[:, None] * ab
    return float(np.sqrt(((proj - p) ** 2).sum(axis=1)).min())


def line_contour_intersections(contour: Contour, line: LineFit) -> np.ndarray:
    """Signed positions ``t`` along ``line`` where it crosses contour edges."""
    a, b = contour.segments()
    p = np.asarray(line.point, dtype=np.float64)
    d = np.asarray(line.direction, dtype=np.float64)
    e = b - a
    denom = d[0] * e[:, 1] - d[1] * e[:, 0]
    ap = a - p
    ts = []
    par = np.abs(denom) < 1e-12
    if (~par).any():
        t = (ap[:, 0] * e[:, 1] - ap[:, 1] * e[:, 0])[~par] / denom[~par]
        s = (ap[:, 0] * d[1] - ap[:, 1] * d[0])[~par] / denom[~par]
        ok = (s >= -1e-9) & (s <= 1 + 1e-9)
        ts.extend(t[ok])
    for i in np.nonzero(par)[0]:
        # collinear edges contribute both end points
        if abs(ap[i, 0] * d[1] - ap[i, 1] * d[0]) < 1e-9:
            ts.extend([float(np.dot(a[i] - p, d)), float(np.dot(b[i] - p, d))])
    return np.array(ts, dtype=np.float64)


def endpoints_from_contour(contour: Contour, line: LineFit, degraded=False) -> TubePoseImage:
    """Intersect the anchored axis with the contour; keep the two extreme crossings."""
    ts = line_contour_intersections(contour, line)
    if len(ts) < 2 or ts.max() - ts.min() <= 0:
        raise IntersectionError(f"axis meets the contour at {len(ts)} point(s); need two")
    p = np.asarray(line.point)
    d = np.asarray(line.direction)
    ox, oy = contour.origin
    off = np.array([ox, oy], dtype=np.float64)
    e1 = p + ts.min() * d + off
    e2 = p + ts.max() * d + off
    return TubePoseImage(endpoints=(tuple(map(float, e1)), tuple(map(float, e2))),
                         centroid=tuple(map(float, p + off)),
                         orientation_deg=line.angle_deg, degraded=degraded)


# ------------------------------------------------------------ composition

def estimate_pose_2d(crop: GrayImage, detection_centroid, block=BLOCK, offset=OFFSET,
                     debug_dir=None) -> TubePoseImage:
    """Full pose pipeline on a crop; ``detection_centroid`` is in crop coordinates.

    Errors carry the failing stage in their message. With ``debug_dir`` the
    intermediate images are written there as PGM files.
    """
    stage = "binarize"
    try:
        stages = binarize_stages(crop, block, offset)
        if debug_dir is not None:
            os.makedirs(debug_dir, exist_ok=True)
            for name in ("blur", "sobel", "equalized"):
                save_pgm(stages[name], os.path.join(debug_dir, f"{name}.pgm"))
            save_pgm(stages["mask"].to_image(), os.path.join(debug_dir, "mask.pgm"))
        stage = "contours"
        contours = find_contours(stages["mask"])
        stage = "select"
        chosen, degraded = select_tube_contour(contours, detection_centroid)
        if debug_dir is not None:
            sel = np.zeros_like(stages["mask"].bits, dtype=np.uint8)
            sel[chosen.filled[:, 1], chosen.filled[:, 0]] = 128
            sel[chosen.points[:, 1], chosen.points[:, 0]] = 255
            save_pgm(GrayImage(sel), os.path.join(debug_dir, "contour.pgm"))
        stage = "fit"
        line = fit_line_least_squares(chosen.filled, anchor=detection_centroid)
        stage = "endpoints"
        return endpoints_from_contour(chosen, line, degraded)
    except StageError:
        raise
    except TubelocError as exc:
        raise StageError(str(exc), stage=stage) from exc
