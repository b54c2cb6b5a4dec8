"""Pinhole-model lifting of image points to metric 3-D, and DEM rasterisation.

Camera frame: x right, y down, z along the optical axis. A rig's mount pose
maps camera coordinates to the world frame, ``p_world = R p_cam + t``. The
world frame is z-up: the ground plane is spanned by world x and y and
elevation is world z.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, MissingDepthError
from .imgcore import DisparityImage, GrayImage, save_pgm

DEFAULT_BASELINE = 0.12
DEFAULT_TUBE_LENGTH = 0.15
DEM_CELL = 0.02


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")


def intrinsics_from_hfov(width, height, hfov_deg) -> CameraIntrinsics:
    if not 0 < hfov_deg < 180:
        raise ValueError(f"horizontal field of view must be in (0, 180) degrees, got {hfov_deg}")
    f = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
    return CameraIntrinsics(f, f, width / 2.0, height / 2.0, width, height)


@dataclass(frozen=True, eq=False)
class StereoRig:
    intrinsics: CameraIntrinsics
    baseline: float = DEFAULT_BASELINE
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    tube_length: float = DEFAULT_TUBE_LENGTH

    def __post_init__(self):
        if not self.baseline > 0:
            raise ValueError("baseline must be positive")
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-9:
            raise ValueError("mount rotation is not orthonormal")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.array(self.translation, dtype=np.float64).reshape(3))

    def to_world(self, p_cam):
        return np.asarray(p_cam, dtype=np.float64) @ self.rotation.T + self.translation

    @classmethod
    def from_file(cls, path) -> "StereoRig":
        with open(path, encoding="utf-8") as fh:
            return parse_rig(fh.read(), source=str(path))

    def to_text(self) -> str:
        k = self.intrinsics
        lines = [f"width = {k.width}", f"height = {k.height}", f"fx = {k.fx!r}", f"fy = {k.fy!r}",
                 f"cx = {k.cx!r}", f"cy = {k.cy!r}", f"baseline_m = {self.baseline!r}",
                 "rotation = " + " ".join(repr(float(v)) for v in self.rotation.ravel()),
                 "translation = " + " ".join(repr(float(v)) for v in self.translation),
                 f"tube_length_m = {self.tube_length!r}"]
        return "\n".join(lines) + "\n"


RIG_KEYS = {"width", "height", "fx", "fy", "cx", "cy", "hfov_deg", "baseline_m", "rotation", "translation",
            "tube_length_m"}


def parse_rig(text: str, source="<rig>") -> StereoRig:
    """Parse a ``key = value`` rig file. Either ``fx`` or ``hfov_deg`` is required."""
    kv = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{source}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        if k.strip() not in RIG_KEYS:
            raise DataError(f"{source}:{lineno}: unknown key {k.strip()!r}")
        try:
            kv[k.strip()] = [float(t) for t in v.replace(",", " ").split()]
        except ValueError:
            raise DataError(f"{source}:{lineno}: non-numeric value {v.strip()!r}") from None
    try:
        width, height = int(kv["width"][0]), int(kv["height"][0])
    except KeyError as exc:
        raise DataError(f"{source}: missing key {exc.args[0]!r}") from None
    if "fx" in kv:
        fx = kv["fx"][0]
        fy = kv.get("fy", [fx])[0]
        cx = kv.get("cx", [width / 2.0])[0]
        cy = kv.get("cy", [height / 2.0])[0]
        intr = CameraIntrinsics(fx, fy, cx, cy, width, height)
    elif "hfov_deg" in kv:
        base = intrinsics_from_hfov(width, height, kv["hfov_deg"][0])
        intr = CameraIntrinsics(base.fx, base.fy, kv.get("cx", [base.cx])[0], kv.get("cy", [base.cy])[0],
                                width, height)
    else:
        raise DataError(f"{source}: rig needs either fx or hfov_deg")
    rot = kv.get("rotation", list(np.eye(3).ravel()))
    trans = kv.get("translation", [0.0, 0.0, 0.0])
    if len(rot) != 9 or len(trans) != 3:
        raise DataError(f"{source}: rotation needs 9 values and translation 3")
    try:
        return StereoRig(intr, kv.get("baseline_m", [DEFAULT_BASELINE])[0], np.array(rot), np.array(trans),
                         kv.get("tube_length_m", [DEFAULT_TUBE_LENGTH])[0])
    except ValueError as exc:
        raise DataError(f"{source}: {exc}") from None


def disparity_to_point(u, v, d, rig: StereoRig) -> np.ndarray:
    """Camera-frame point for pixel (u, v) at disparity ``d``; vectorises over arrays."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(~(d > 0)):
        raise MissingDepthError("disparity must be positive")
    k = rig.intrinsics
    z = k.fx * rig.baseline / d
    x = (np.asarray(u, dtype=np.float64) - k.cx) * z / k.fx
    y = (np.asarray(v, dtype=np.float64) - k.cy) * z / k.fy
    return np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def point_to_disparity(p, rig: StereoRig) -> np.ndarray:
    """Inverse of :func:`disparity_to_point`: (u, v, d) for camera-frame points."""
    p = np.asarray(p, dtype=np.float64)
    k = rig.intrinsics
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    return np.stack([k.fx * x / z + k.cx, k.fy * y / z + k.cy, k.fx * rig.baseline / z], axis=-1)


def sample_disparity(disparity: DisparityImage, u, v, radius=2, name="point") -> float:
    """Median of the valid disparities in a (2r+1)^2 window around (u, v)."""
    x, y = int(round(u)), int(round(v))
    vals = disparity.values[max(y - radius, 0):y + radius + 1, max(x - radius, 0):x + radius + 1]
    vals = vals[vals > 0]
    if vals.size == 0:
        raise MissingDepthError(f"no valid disparity within {2 * radius + 1}x{2 * radius + 1} of {name} "
                                f"({u:.1f}, {v:.1f})")
    return float(np.median(vals))


def yaw_deg(p1, p2) -> float:
    d = np.asarray(p2, dtype=np.float64) - np.asarray(p1, dtype=np.float64)
    a = math.degrees(math.atan2(d[1], d[0])) % 180.0
    return 0.0 if a >= 180.0 - 1e-12 else a


@dataclass(frozen=True)
class TubePose3D:
    endpoints: tuple  # two world points, metres
    centroid: tuple
    yaw_deg: float
    plausible: bool = True
    degraded: bool = False

    @property
    def length(self) -> float:
        return float(np.linalg.norm(np.subtract(self.endpoints[1], self.endpoints[0])))

    def to_json(self, image=None) -> dict:
        return {"image": image,
                "endpoints_m": [[float(v) for v in p] for p in self.endpoints],
                "centroid_m": [float(v) for v in self.centroid],
                "yaw_deg": float(self.yaw_deg), "length_m": self.length,
                "plausible": bool(self.plausible), "degraded": bool(self.degraded)}


def lift_pose_to_3d(pose2d, disparity: DisparityImage, rig: StereoRig) -> TubePose3D:
    """World-frame end points, centroid and yaw of an image-plane pose."""
    named = (("endpoint 1", pose2d.endpoints[0]), ("endpoint 2", pose2d.endpoints[1]),
             ("centroid", pose2d.centroid))
    world = []
    for name, (u, v) in named:
        d = sample_disparity(disparity, u, v, name=name)
        world.append(rig.to_world(disparity_to_point(u, v, d, rig)))
    e1, e2, c = world
    pose = TubePose3D((tuple(e1), tuple(e2)), tuple(c), yaw_deg(e1, e2), True,
                      bool(getattr(pose2d, "degraded", False)))
    sep = pose.length
    plausible = 0.5 * rig.tube_length <= sep <= 2.0 * rig.tube_length
    return TubePose3D(pose.endpoints, pose.centroid, pose.yaw_deg, plausible, pose.degraded)


@dataclass(frozen=True, eq=False)
class Dem:
    origin: tuple  # world (x, y) of the lower-left corner of cell [0, 0]
    cell: float
    elevation: np.ndarray  # (ny, nx), NaN marks empty cells; row j covers y in [y0 + j cell, ...)

    @property
    def empty(self) -> np.ndarray:
        return np.isnan(self.elevation)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "elevation"])
            for j, i in zip(*np.nonzero(~self.empty)):
                w.writerow([self.origin[0] + (i + 0.5) * self.cell, self.origin[1] + (j + 0.5) * self.cell,
                            float(self.elevation[j, i])])

    def to_pgm(self, path) -> tuple:
        """Write elevations scaled to 1..255 (0 = empty) plus a ``.minmax`` sidecar."""
        z = self.elevation
        ok = ~np.isnan(z)
        lo = float(np.nanmin(z)) if ok.any() else 0.0
        hi = float(np.nanmax(z)) if ok.any() else 0.0
        span = hi - lo if hi > lo else 1.0
        img = np.zeros(z.shape, dtype=np.uint8)
        img[ok] = np.floor(1 + 254 * (z[ok] - lo) / span + 0.5).astype(np.uint8)
        save_pgm(GrayImage(img[::-1]), path)
        with open(str(path) + ".minmax", "w") as fh:
            fh.write(f"min {lo!r}\nmax {hi!r}\ncell {self.cell!r}\n"
                     f"origin {self.origin[0]!r} {self.origin[1]!r}\n")
        return lo, hi


def build_dem(disparity: DisparityImage, image: GrayImage | None, rig: StereoRig, cell=DEM_CELL) -> Dem:
    """Grid of per-cell maximum elevation over every valid disparity pixel."""
    if image is not None and (image.width, image.height) != (disparity.width, disparity.height):
        raise DataError("disparity and image dimensions differ")
    v, u = np.nonzero(disparity.valid)
    if u.size == 0:
        return Dem((0.0, 0.0), cell, np.full((1, 1), np.nan))
    pts = rig.to_world(disparity_to_point(u, v, disparity.values[v, u], rig))
    x0 = math.floor(pts[:, 0].min() / cell) * cell
    y0 = math.floor(pts[:, 1].min() / cell) * cell
    ix = np.floor((pts[:, 0] - x0) / cell).astype(np.int64)
    iy = np.floor((pts[:, 1] - y0) / cell).astype(np.int64)
    nx, ny = int(ix.max()) + 1, int(iy.max()) + 1
    flat = np.full(nx * ny, -np.inf)
    np.maximum.at(flat, iy * nx + ix, pts[:, 2])
    grid = flat.reshape(ny, nx)
    grid[np.isneginf(grid)] = np.nan
    return Dem((x0, y0), cell, grid)
