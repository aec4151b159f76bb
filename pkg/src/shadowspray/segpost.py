"""From segmentation maps to droplet records and spray statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import ndimage

from .geometry import equivalent_diameter

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class DropletRecord:
    instance_id: int
    area_px: int
    diameter_px: float
    diameter_um: float
    centroid_x: float
    centroid_y: float
    touches_border: bool

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "area_px": self.area_px,
            "diameter_px": self.diameter_px,
            "diameter_um": self.diameter_um,
            "centroid_x": self.centroid_x,
            "centroid_y": self.centroid_y,
            "touches_border": self.touches_border,
        }


@dataclass(frozen=True)
class TilingSpec:
    tile_size: int = 256
    overlap_margin: int = 32

    def __post_init__(self):
        if self.tile_size < 1:
            raise ValueError("tile_size must be positive")
        if not 0 <= self.overlap_margin < self.tile_size / 2:
            raise ValueError(
                f"overlap_margin must lie in [0, tile_size/2), got {self.overlap_margin}"
            )


@dataclass
class Histogram:
    edges: np.ndarray
    values: np.ndarray


@dataclass
class SprayStats:
    count: int
    smd_um: float | None
    diameter_histogram: Histogram
    volume_pdf: Histogram | None

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "smd_um": self.smd_um,
            "diameter_histogram": {
                "edges_um": self.diameter_histogram.edges.tolist(),
                "counts": self.diameter_histogram.values.tolist(),
            },
            "volume_pdf": None if self.volume_pdf is None else {
                "edges_um": self.volume_pdf.edges.tolist(),
                "density": self.volume_pdf.values.tolist(),
            },
        }


def binarize(seg_map: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(seg_map) >= threshold


def connected_components(binary: np.ndarray, scale: float = 1.0) -> list[DropletRecord]:
    """8-connected components of a binary grid, ordered by label (raster scan order).

    ``scale`` is um per pixel and only affects ``diameter_um``.
    """
    binary = np.asarray(binary, dtype=bool)
    labels, n = ndimage.label(binary, structure=EIGHT_CONNECTED)
    if n == 0:
        return []
    idx = np.arange(1, n + 1)
    areas = ndimage.sum_labels(binary, labels, idx).astype(int)
    cy, cx = np.array(ndimage.center_of_mass(binary, labels, idx)).T
    h, w = binary.shape
    border = np.zeros(n + 1, dtype=bool)
    for edge in (labels[0, :], labels[-1, :], labels[:, 0], labels[:, -1]):
        border[edge] = True
    records = []
    for k in range(n):
        d = equivalent_diameter(areas[k])
        records.append(DropletRecord(
            instance_id=k + 1,
            area_px=int(areas[k]),
            diameter_px=d,
            diameter_um=d * scale,
            centroid_x=float(cx[k]) + 0.5,
            centroid_y=float(cy[k]) + 0.5,
            touches_border=bool(border[k + 1]),
        ))
    return records


def tile_windows(length: int, tile: int, margin: int) -> list[tuple[int, int, int, int]]:
    """1D tiling: ``(tile_start, tile_stop, write_start, write_stop)`` per tile.

    Write regions partition ``[0, length)``; every interior write boundary sits at
    least ``margin`` pixels inside both neighbouring tiles.
    """
    if length <= tile:
        return [(0, length, 0, length)]
    stride = tile - 2 * margin
    starts = []
    s = 0
    while s + tile < length:
        starts.append(s)
        s += stride
    starts.append(length - tile)
    out = []
    prev_stop = 0
    for k, s in enumerate(starts):
        last = k == len(starts) - 1
        w_stop = length if last else s + tile - margin
        out.append((s, s + tile, prev_stop, w_stop))
        prev_stop = w_stop
    return out


def split_stitch_segment(image: np.ndarray, segmenter: Callable[[np.ndarray], np.ndarray],
                         tiling: TilingSpec = TilingSpec()) -> np.ndarray:
    """Segment an image tile by tile and stitch the cropped tile centres back together.

    Tiles overlap by ``overlap_margin`` on interior edges; only the central part of
    each tile is kept, so segmenter artifacts near tile edges never reach the output.
    Images smaller than a tile are segmented in a single pass.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    out = np.full((h, w), np.nan)
    for ty0, ty1, wy0, wy1 in tile_windows(h, tiling.tile_size, tiling.overlap_margin):
        for tx0, tx1, wx0, wx1 in tile_windows(w, tiling.tile_size, tiling.overlap_margin):
            seg = np.asarray(segmenter(image[ty0:ty1, tx0:tx1]), dtype=float)
            if seg.shape != (ty1 - ty0, tx1 - tx0):
                raise ValueError(f"segmenter returned shape {seg.shape} for a {(ty1 - ty0, tx1 - tx0)} tile")
            out[wy0:wy1, wx0:wx1] = seg[wy0 - ty0:wy1 - ty0, wx0 - tx0:wx1 - tx0]
    if np.isnan(out).any():
        raise AssertionError("tile assembly left uncovered pixels")
    return out


def with_edge_loss(segmenter: Callable[[np.ndarray], np.ndarray], width: int = 2):
    """Wrap a segmenter so it loses ``width`` pixels of foreground along every tile edge.

    A simple model of context-starved predictions at tile borders; with no tile
    overlap it splits objects that straddle a seam.
    """
    def run(tile):
        seg = np.array(segmenter(tile), dtype=float)
        if width > 0:
            seg[:width, :] = 0
            seg[-width:, :] = 0
            seg[:, :width] = 0
            seg[:, -width:] = 0
        return seg

    return run


def smd(diameters) -> float:
    """Sauter mean diameter, sum(d^3) / sum(d^2)."""
    d = np.asarray(diameters, dtype=float)
    if d.size == 0:
        raise ValueError("SMD of an empty set is undefined")
    if np.any(d <= 0):
        raise ValueError("diameters must be positive")
    return math.fsum(d ** 3) / math.fsum(d ** 2)


def volume_pdf(diameters, bin_width: float = 1.0) -> Histogram:
    """Volume-weighted diameter density on bins aligned to multiples of ``bin_width``.

    Bins are half-open ``[k*w, (k+1)*w)`` and the density integrates to 1.
    """
    d = np.asarray(diameters, dtype=float)
    if d.size == 0:
        raise ValueError("volume PDF of an empty set is undefined")
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    k = np.floor(d / bin_width).astype(int)
    k0 = k.min()
    weights = np.bincount(k - k0, weights=d ** 3)
    edges = (k0 + np.arange(len(weights) + 1)) * bin_width
    density = weights / (weights.sum() * bin_width)
    return Histogram(edges, density)


def _selected(records, exclude_border: bool):
    return [r for r in records if not (exclude_border and r.touches_border)]


def diameter_histogram(records, bins=1.0, exclude_border: bool = True) -> Histogram:
    """Count histogram of equivalent diameters (um) on half-open lower-inclusive bins.

    ``bins`` is either a bin width or an explicit edge array. Values outside the
    edges are dropped.
    """
    d = np.array([r.diameter_um for r in _selected(records, exclude_border)], dtype=float)
    if np.ndim(bins) == 0:
        width = float(bins)
        top = math.floor(d.max() / width) + 1 if d.size else 1
        edges = np.arange(top + 1) * width
    else:
        edges = np.asarray(bins, dtype=float)
    idx = np.searchsorted(edges, d, side="right") - 1
    keep = (idx >= 0) & (idx < len(edges) - 1)
    counts = np.bincount(idx[keep], minlength=len(edges) - 1)
    return Histogram(edges, counts)


def spray_stats(records, bin_width: float = 1.0, exclude_border: bool = True) -> SprayStats:
    sel = _selected(records, exclude_border)
    d = [r.diameter_um for r in sel]
    return SprayStats(
        count=len(sel),
        smd_um=smd(d) if d else None,
        diameter_histogram=diameter_histogram(sel, bin_width, exclude_border=False),
        volume_pdf=volume_pdf(d, bin_width) if d else None,
    )
