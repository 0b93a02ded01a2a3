"""Geometry and arithmetic of redundant counting.

Conventions used throughout:

* a point annotation is ``(x, y)`` with ``x`` the column and ``y`` the row;
* images and count maps are indexed ``[row, col]``;
* an image of size ``H x W`` is zero padded by ``r - 1`` pixels on every side,
  and count-map entry ``[y, x]`` counts the points inside the ``r x r`` window
  whose top-left corner is padded pixel ``(x, y)``. The map is therefore
  ``(H + r - 1) x (W + r - 1)`` and every image pixel lies in exactly ``r*r``
  windows.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter


@dataclass(frozen=True)
class CountGeometry:
    """Receptive-field side ``r`` and evaluation stride ``s``."""

    r: int = 32
    s: int = 1

    def __post_init__(self):
        if self.r < 1 or self.s < 1:
            raise ValueError(f"r and s must be >= 1 (got r={self.r}, s={self.s})")
        if self.r % self.s:
            raise ValueError(f"stride {self.s} does not divide receptive field {self.r}")

    @property
    def pad(self) -> int:
        return self.r - 1

    def with_stride(self, s: int) -> "CountGeometry":
        return CountGeometry(self.r, s)


@dataclass
class DotAnnotation:
    """One point per object, in pixel coordinates of a ``width x height`` image."""

    width: int
    height: int
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.int64).reshape(-1, 2)
        if len(pts):
            x, y = pts[:, 0], pts[:, 1]
            bad = (x < 0) | (x >= self.width) | (y < 0) | (y >= self.height)
            if bad.any():
                raise ValueError(
                    f"{int(bad.sum())} point(s) outside the {self.width}x{self.height} image, "
                    f"first {tuple(pts[bad][0])}"
                )
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)

    @property
    def count(self) -> int:
        return len(self.points)

    def duplicates(self) -> list[tuple[int, int, int]]:
        """``(x, y, multiplicity)`` for every pixel annotated more than once."""
        if not len(self.points):
            return []
        uniq, counts = np.unique(self.points, axis=0, return_counts=True)
        return [(int(p[0]), int(p[1]), int(c)) for p, c in zip(uniq, counts) if c > 1]

    def dot_map(self) -> np.ndarray:
        """Integer image with the number of points at each pixel."""
        dots = np.zeros((self.height, self.width), dtype=np.int64)
        if len(self.points):
            np.add.at(dots, (self.points[:, 1], self.points[:, 0]), 1)
        return dots

    @classmethod
    def from_dot_map(cls, dots: np.ndarray) -> "DotAnnotation":
        """Inverse of :meth:`dot_map`; a pixel value ``v > 0`` yields ``v`` points."""
        dots = np.asarray(dots)
        if dots.ndim != 2:
            raise ValueError("dot image must be single-channel")
        ys, xs = np.nonzero(dots)
        reps = dots[ys, xs].astype(np.int64)
        pts = np.repeat(np.stack([xs, ys], axis=1), reps, axis=0)
        return cls(width=dots.shape[1], height=dots.shape[0], points=pts)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y"])
            writer.writerows(self.points.tolist())

    @classmethod
    def from_csv(cls, path, width: int, height: int) -> "DotAnnotation":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"x", "y"} <= set(reader.fieldnames):
                raise ValueError(f"{path}: expected a header with columns x,y")
            pts = [(int(row["x"]), int(row["y"])) for row in reader]
        return cls(width=width, height=height, points=np.array(pts, dtype=np.int64).reshape(-1, 2))


def pad_image(image: np.ndarray, geometry: CountGeometry) -> np.ndarray:
    """Zero-pad the two spatial axes by ``r - 1`` on every side.

    2-D input is ``(H, W)``; 3-D input is channels-first ``(C, H, W)``.
    """
    image = np.asarray(image)
    p = geometry.pad
    if image.ndim == 2:
        return np.pad(image, ((p, p), (p, p)))
    if image.ndim == 3:
        return np.pad(image, ((0, 0), (p, p), (p, p)))
    raise ValueError(f"expected a 2-D or 3-D image, got shape {image.shape}")


def output_shape(input_size, geometry: CountGeometry):
    """Side length of the count map for an image side (or ``(H, W)`` pair)."""
    if isinstance(input_size, (tuple, list)):
        return tuple(output_shape(n, geometry) for n in input_size)
    full = int(input_size) + geometry.r - 1
    return math.ceil(full / geometry.s)


def window_sums(values: np.ndarray, r: int) -> np.ndarray:
    """Sums over every ``r x r`` window of an already padded 2-D array (valid positions)."""
    integral = np.zeros((values.shape[0] + 1, values.shape[1] + 1), dtype=values.dtype)
    np.cumsum(np.cumsum(values, axis=0), axis=1, out=integral[1:, 1:])
    return integral[r:, r:] - integral[:-r, r:] - integral[r:, :-r] + integral[:-r, :-r]


def build_target(annotation: DotAnnotation, geometry: CountGeometry) -> np.ndarray:
    """Count map of an annotation: points per ``r x r`` window of the padded image.

    Integer valued. For stride ``s > 1`` the stride-1 map is subsampled.
    """
    padded = pad_image(annotation.dot_map(), geometry)
    target = window_sums(padded, geometry.r)
    return subsample_stride(target, geometry.s)


def redundancy_factor(geometry: CountGeometry) -> int:
    """Number of evaluated windows that contain any given image pixel: ``(r/s)**2``."""
    if geometry.r % geometry.s:
        raise ValueError(f"stride {geometry.s} does not divide receptive field {geometry.r}")
    return (geometry.r // geometry.s) ** 2


def recover_count(count_map: np.ndarray, geometry: CountGeometry):
    """Object count from a (possibly strided) count map; negatives are not clamped.

    Integer maps are summed exactly and give an ``int`` when the sum divides
    evenly by the redundancy factor.
    """
    values = np.asarray(count_map)
    factor = redundancy_factor(geometry)
    if np.issubdtype(values.dtype, np.integer):
        total = int(values.sum())
        return total // factor if total % factor == 0 else total / factor
    return float(values.sum(dtype=np.float64)) / factor


def subsample_stride(count_map: np.ndarray, s: int) -> np.ndarray:
    """Keep entries at ``(i*s, j*s)`` of the last two axes, starting at offset 0."""
    if s < 1:
        raise ValueError("stride must be >= 1")
    count_map = np.asarray(count_map)
    return count_map if s == 1 else count_map[..., ::s, ::s]


def build_gaussian_target(annotation: DotAnnotation, sigma: float = 3.0, truncate: float = 4.0) -> np.ndarray:
    """Density map: a unit-mass Gaussian at every point, cut off at ``truncate * sigma``.

    Same size as the image; mass falling outside the image is lost.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    dots = annotation.dot_map().astype(np.float64)
    return gaussian_filter(dots, sigma=sigma, truncate=truncate, mode="constant", cval=0.0)


def save_count_map_csv(count_map: np.ndarray, path) -> None:
    np.savetxt(path, np.asarray(count_map, dtype=np.float64), delimiter=",", fmt="%.9g")


def load_count_map_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))


def save_count_map_png(count_map: np.ndarray, path) -> dict:
    """Write a 16-bit grayscale heatmap and a ``<path>.json`` sidecar with the scale.

    Pixel values are ``round(clip(v, 0) / max * 65535)``; multiply by
    ``scale`` from the sidecar to get counts back (up to quantization).
    """
    from PIL import Image

    values = np.clip(np.asarray(count_map, dtype=np.float64), 0.0, None)
    peak = float(values.max()) if values.size else 0.0
    scale = peak / 65535.0 if peak > 0 else 1.0
    pixels = np.round(values / scale).astype(np.uint16)
    Image.fromarray(pixels).save(path)
    meta = {"scale": scale, "max_value": peak, "shape": list(values.shape), "clipped_negative": bool((np.asarray(count_map) < 0).any())}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2))
    return meta
