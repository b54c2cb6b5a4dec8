"""Procedural fixtures: rendered tubes, terrain scenes and analytic disparity.

Used by the test-suite, the demo scripts and the toy dataset writer. Angles
follow the pose convention of :mod:`tubeloc.posecv` (x right, y down).
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .imgcore import BoundingBox, DisparityImage, GrayImage, save_pfm, save_pgm


def _supersample_grid(width, height, ss):
    off = (np.arange(ss) + 0.5) / ss - 0.5
    ys = (np.arange(height)[:, None] + off[None, :]).ravel()
    xs = (np.arange(width)[:, None] + off[None, :]).ravel()
    return np.meshgrid(xs, ys)


def tube_layer(width, height, center, angle_deg, length, diameter, ss=4):
    """Coverage (0..1) and cylindrical shading (0..1) of a flat-ended tube, per pixel."""
    cov = np.zeros((height, width))
    sh = np.zeros((height, width))
    reach = 0.5 * np.hypot(length, diameter) + 2
    x0, x1 = max(int(center[0] - reach), 0), min(int(np.ceil(center[0] + reach)) + 1, width)
    y0, y1 = max(int(center[1] - reach), 0), min(int(np.ceil(center[1] + reach)) + 1, height)
    if x1 <= x0 or y1 <= y0:
        return cov, sh
    w, h = x1 - x0, y1 - y0
    X, Y = _supersample_grid(w, h, ss)
    th = np.radians(angle_deg)
    dx, dy = X + x0 - center[0], Y + y0 - center[1]
    u = dx * np.cos(th) + dy * np.sin(th)
    v = -dx * np.sin(th) + dy * np.cos(th)
    inside = (np.abs(u) <= length / 2) & (np.abs(v) <= diameter / 2)
    shade = np.where(inside, np.sqrt(np.clip(1 - (2 * v / diameter) ** 2, 0, 1)), 0.0)
    cnt = inside.reshape(h, ss, w, ss).sum(axis=(1, 3))
    cov[y0:y1, x0:x1] = cnt / (ss * ss)
    tot = shade.reshape(h, ss, w, ss).sum(axis=(1, 3))
    sh[y0:y1, x0:x1] = np.where(cnt > 0, tot / np.maximum(cnt, 1), 0.0)
    return cov, sh


def render_tube(width, height, center, angle_deg, length, diameter=None, background=70.0,
                bright=215.0, dark=150.0, noise=0.0, seed=None, origin=(0, 0)) -> GrayImage:
    """A bright tube with cylindrical shading on a flat background."""
    if diameter is None:
        diameter = max(6.0, length / 5.0)
    cov, sh = tube_layer(width, height, center, angle_deg, length, diameter)
    tube = dark + (bright - dark) * sh
    img = background * (1 - cov) + tube * cov
    if noise:
        img = img + np.random.default_rng(seed).normal(0.0, noise, img.shape)
    return GrayImage(np.floor(img + 0.5).clip(0, 255).astype(np.uint8), origin=origin)


def tube_endpoints(center, angle_deg, length):
    th = np.radians(angle_deg)
    d = np.array([np.cos(th), np.sin(th)]) * length / 2
    c = np.asarray(center, dtype=np.float64)
    return c - d, c + d


def terrain(width, height, seed=None, mean=95.0, amplitude=25.0):
    """Smooth random sand-like texture.

    Coarse octaves are filtered on a decimated grid and upsampled.
    """
    from scipy import ndimage

    rng = np.random.default_rng(seed)
    base = np.zeros((height, width))
    for sigma, amp in ((40, 1.0), (10, 0.5), (2, 0.25)):
        f = max(1, sigma // 5)
        small = rng.normal(size=(-(-height // f), -(-width // f)))
        layer = ndimage.gaussian_filter(small, sigma / f)
        if f > 1:
            layer = ndimage.zoom(layer, f, order=1)[:height, :width]
        base += amp * layer / (layer.std() + 1e-12)
    return mean + amplitude * base / 1.75


@dataclass
class Scene:
    image: GrayImage
    box: BoundingBox  # ground-truth tube box, image pixels
    center: tuple
    orientation_deg: float
    length_px: float
    diameter_px: float
    disparity: DisparityImage | None = None


def render_scene(width=1024, height=768, seed=0, tube=True, length=None, angle=None,
                 center=None, disparity_fn=None, tube_disparity_boost=0.0) -> Scene:
    """Terrain frame with at most one tube; optional analytic disparity."""
    rng = np.random.default_rng(seed)
    img = terrain(width, height, seed=rng.integers(1 << 31))
    if length is None:
        length = float(rng.uniform(60, 160)) * width / 1024
    diameter = max(6.0, length / 5.5)
    if angle is None:
        angle = float(rng.uniform(0, 180))
    if center is None:
        m = length / 2 + 10
        center = (float(rng.uniform(m, width - m)), float(rng.uniform(m, height - m)))
    cov = np.zeros((height, width))
    if tube:
        cov, sh = tube_layer(width, height, center, angle, length, diameter)
        img = img * (1 - cov) + (150 + 70 * sh) * cov
    pixels = np.floor(img + 0.5).clip(0, 255).astype(np.uint8)
    e1, e2 = tube_endpoints(center, angle, length)
    r = diameter / 2
    th = np.radians(angle)
    ex = abs(np.sin(th)) * r
    ey = abs(np.cos(th)) * r
    x1, x2 = min(e1[0], e2[0]) - ex, max(e1[0], e2[0]) + ex
    y1, y2 = min(e1[1], e2[1]) - ey, max(e1[1], e2[1]) + ey
    box = BoundingBox(x1, y1, x2 - x1, y2 - y1)
    disp = None
    if disparity_fn is not None:
        v, u = np.mgrid[0:height, 0:width].astype(np.float64)
        d = disparity_fn(u, v) + tube_disparity_boost * (cov > 0.5)
        disp = DisparityImage(d.astype(np.float32))
    return Scene(GrayImage(pixels), box, tuple(center), float(angle % 180.0), float(length), diameter, disp)


def write_dataset(root, n_images=3, seed=0, negatives=0, width=1024, height=768):
    """Write a dataset directory: images/*.pgm, labels/*.txt, poses/*.txt."""
    for sub in ("images", "labels", "poses"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    scenes = []
    for i in range(n_images + negatives):
        has_tube = i < n_images
        sc = render_scene(width, height, seed=seed + i, tube=has_tube)
        stem = f"frame_{i:04d}"
        save_pgm(sc.image, os.path.join(root, "images", stem + ".pgm"))
        with open(os.path.join(root, "labels", stem + ".txt"), "w") as fh:
            if has_tube:
                b = sc.box
                fh.write(f"0 {(b.x + b.w / 2) / width:.6f} {(b.y + b.h / 2) / height:.6f} "
                         f"{b.w / width:.6f} {b.h / height:.6f}\n")
        if has_tube:
            with open(os.path.join(root, "poses", stem + ".txt"), "w") as fh:
                fh.write(f"{sc.orientation_deg:.4f} {sc.center[0]:.3f} {sc.center[1]:.3f}\n")
        if sc.disparity is not None:
            os.makedirs(os.path.join(root, "disparity"), exist_ok=True)
            save_pfm(sc.disparity, os.path.join(root, "disparity", stem + ".pfm"))
        scenes.append(sc)
    return scenes
